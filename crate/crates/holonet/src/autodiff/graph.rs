//! Computation tape: forward ops record nodes, backward walks them in reverse.

use super::tensor::{Element, Tensor};
use super::{shape_err, AutodiffError};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Operator tag plus whatever the backward pass needs.
#[derive(Debug)]
pub enum Op<T> {
    Leaf,
    /// 3x3 (or any odd k) same-padding stride-1 cross-correlation + bias.
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    /// 2x2 stride-2 transposed convolution, no bias, no overlap.
    UpConv2d {
        x: NodeId,
        w: NodeId,
    },
    /// 2x2 stride-2 max pooling; `argmax` holds the flat input index
    /// chosen for each output element (first in row-major order on ties).
    MaxPool2d {
        x: NodeId,
        argmax: Vec<u32>,
    },
    /// Channel-axis concatenation, a then b.
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Swish {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Square {
        x: NodeId,
    },
    /// Channel range view [start, start+count).
    SliceChannels {
        x: NodeId,
        start: usize,
        count: usize,
    },
    /// Mean elementwise Huber loss against a constant target.
    HuberMean {
        pred: NodeId,
        target: Tensor<T>,
        delta: T,
    },
    /// Mean squared error against a constant target.
    MseMean {
        pred: NodeId,
        target: Tensor<T>,
    },
    /// Smoothed isotropic total variation, summed per image, mean over batch.
    TvMean {
        pred: NodeId,
        eps: T,
    },
    /// Weighted sum of same-shape nodes.
    Lincomb {
        terms: Vec<(NodeId, T)>,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
}

/// Tape of tensor operations in topological (creation) order.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached
    /// this node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    // ---------------------------------------------------------------- conv2d

    /// Same-padding stride-1 cross-correlation with an odd square kernel.
    ///
    /// `x`: [b, c_in, h, w], `w`: [c_out, c_in, k, k], `bias`: [c_out].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (bn, cin, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(shape_err(
                "conv2d",
                format!("weight {:?} vs input c_in={} (odd square kernel required)", ws, cin),
            ));
        }
        let (cout, k) = (ws[0], ws[2]);
        if self.value(bias).len() != cout {
            return Err(shape_err(
                "conv2d",
                format!("bias len {} vs c_out {}", self.value(bias).len(), cout),
            ));
        }
        let mut y = Tensor::zeros(&[bn, cout, h, wd]);
        let mut col = vec![T::ZERO; cin * k * k * h * wd];
        let hw = h * wd;
        for item in 0..bn {
            let xs = &self.value(x).data()[item * cin * hw..(item + 1) * cin * hw];
            im2col(xs, cin, h, wd, k, &mut col);
            let ys = &mut y.data_mut()[item * cout * hw..(item + 1) * cout * hw];
            unsafe {
                T::gemm(
                    cout,
                    cin * k * k,
                    hw,
                    T::ONE,
                    self.value(w).data().as_ptr(),
                    (cin * k * k) as isize,
                    1,
                    col.as_ptr(),
                    hw as isize,
                    1,
                    T::ZERO,
                    ys.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
            for c in 0..cout {
                let bv = self.value(bias).data()[c];
                for v in &mut ys[c * hw..(c + 1) * hw] {
                    *v += bv;
                }
            }
        }
        Ok(self.push(Op::Conv2d { x, w, b: bias }, y))
    }

    // -------------------------------------------------------------- upconv2d

    /// 2x2 stride-2 transposed convolution (each input pixel expands into a
    /// disjoint 2x2 output block). `x`: [b, c_in, h, w], `w`: [c_in, c_out, 2, 2].
    pub fn upconv2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId, AutodiffError> {
        let (bn, cin, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[0] != cin || ws[2] != 2 || ws[3] != 2 {
            return Err(shape_err(
                "upconv2d",
                format!("weight {:?} vs input c_in={} (2x2 kernel required)", ws, cin),
            ));
        }
        let cout = ws[1];
        let hw = h * wd;
        let mut y = Tensor::zeros(&[bn, cout, 2 * h, 2 * wd]);
        let mut tmp = vec![T::ZERO; cout * 4 * hw];
        for item in 0..bn {
            let xs = &self.value(x).data()[item * cin * hw..(item + 1) * cin * hw];
            // tmp[(c_out, dy, dx), (y, x)] = sum_cin w[cin, cout, dy, dx] * x[cin, y, x]
            unsafe {
                T::gemm(
                    cout * 4,
                    cin,
                    hw,
                    T::ONE,
                    self.value(w).data().as_ptr(),
                    1,
                    (cout * 4) as isize,
                    xs.as_ptr(),
                    hw as isize,
                    1,
                    T::ZERO,
                    tmp.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
            let ys = &mut y.data_mut()[item * cout * 4 * hw..(item + 1) * cout * 4 * hw];
            scatter_2x2(&tmp, cout, h, wd, ys);
        }
        Ok(self.push(Op::UpConv2d { x, w }, y))
    }

    // -------------------------------------------------------------- maxpool

    /// 2x2 stride-2 max pooling. Requires even spatial dims.
    pub fn maxpool2d(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let (bn, c, h, w) = self.value(x).dims4();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(AutodiffError::Indivisible {
                op: "maxpool2d",
                divisor: 2,
                h,
                w,
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut y = Tensor::zeros(&[bn, c, ho, wo]);
        let mut argmax = vec![0u32; bn * c * ho * wo];
        let xs = self.value(x).data();
        let yd = y.data_mut();
        for plane in 0..bn * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best_idx = base + (2 * oy) * w + 2 * ox;
                    let mut best = xs[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xs[idx] > best {
                            best = xs[idx];
                            best_idx = idx;
                        }
                    }
                    let out = plane * ho * wo + oy * wo + ox;
                    yd[out] = best;
                    argmax[out] = best_idx as u32;
                }
            }
        }
        Ok(self.push(Op::MaxPool2d { x, argmax }, y))
    }

    // ---------------------------------------------------------------- concat

    /// Stack channels a-then-b; batch and spatial dims must agree.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (ba, ca, ha, wa) = self.value(a).dims4();
        let (bb, cb, hb, wb) = self.value(b).dims4();
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(shape_err(
                "concat",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut y = Tensor::zeros(&[ba, ca + cb, ha, wa]);
        let hw = ha * wa;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let yd = y.data_mut();
        for item in 0..ba {
            let dst = item * (ca + cb) * hw;
            yd[dst..dst + ca * hw].copy_from_slice(&ad[item * ca * hw..(item + 1) * ca * hw]);
            yd[dst + ca * hw..dst + (ca + cb) * hw]
                .copy_from_slice(&bd[item * cb * hw..(item + 1) * cb * hw]);
        }
        Ok(self.push(Op::Concat { a, b }, y))
    }

    /// Channel range view [start, start+count) of a [b, c, h, w] tensor.
    pub fn slice_channels(
        &mut self,
        x: NodeId,
        start: usize,
        count: usize,
    ) -> Result<NodeId, AutodiffError> {
        let (bn, c, h, w) = self.value(x).dims4();
        if start + count > c {
            return Err(shape_err(
                "slice_channels",
                format!("range {}..{} out of {} channels", start, start + count, c),
            ));
        }
        let hw = h * w;
        let mut y = Tensor::zeros(&[bn, count, h, w]);
        let xd = self.value(x).data();
        let yd = y.data_mut();
        for item in 0..bn {
            let src = item * c * hw + start * hw;
            yd[item * count * hw..(item + 1) * count * hw]
                .copy_from_slice(&xd[src..src + count * hw]);
        }
        Ok(self.push(Op::SliceChannels { x, start, count }, y))
    }

    // ------------------------------------------------------------ elementwise

    /// Elementwise sum of identically-shaped tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut y = self.value(a).clone();
        for (yv, bv) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *yv += *bv;
        }
        Ok(self.push(Op::Add { a, b }, y))
    }

    /// Swish activation x * sigmoid(x).
    pub fn swish(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v * sigmoid_scalar(v));
        self.push(Op::Swish { x }, y)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| if v > T::ZERO { v } else { T::ZERO });
        self.push(Op::Relu { x }, y)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(sigmoid_scalar);
        self.push(Op::Sigmoid { x }, y)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v * v);
        self.push(Op::Square { x }, y)
    }

    /// Weighted sum sum_i c_i * t_i of same-shape nodes.
    pub fn lincomb(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId, AutodiffError> {
        let first = terms
            .first()
            .ok_or_else(|| shape_err("lincomb", "no terms"))?;
        let shape = self.value(first.0).shape().to_vec();
        let mut y = Tensor::zeros(&shape);
        for &(id, c) in terms {
            if self.value(id).shape() != shape.as_slice() {
                return Err(shape_err(
                    "lincomb",
                    format!("{:?} vs {:?}", self.value(id).shape(), shape),
                ));
            }
            for (yv, xv) in y.data_mut().iter_mut().zip(self.value(id).data()) {
                *yv += c * *xv;
            }
        }
        Ok(self.push(
            Op::Lincomb {
                terms: terms.to_vec(),
            },
            y,
        ))
    }

    // ---------------------------------------------------------------- losses

    /// Mean elementwise Huber loss: 0.5 r^2 below `delta`, delta |r| - 0.5 delta^2 above.
    pub fn huber_mean(
        &mut self,
        pred: NodeId,
        target: &Tensor<T>,
        delta: T,
    ) -> Result<NodeId, AutodiffError> {
        if self.value(pred).shape() != target.shape() {
            return Err(shape_err(
                "huber_mean",
                format!("{:?} vs {:?}", self.value(pred).shape(), target.shape()),
            ));
        }
        let half = T::from_f64(0.5);
        let mut acc = T::ZERO;
        for (&p, &t) in self.value(pred).data().iter().zip(target.data()) {
            let r = p - t;
            acc += if r.abs() <= delta {
                half * r * r
            } else {
                delta * r.abs() - half * delta * delta
            };
        }
        let n = T::from_f64(target.len() as f64);
        Ok(self.push(
            Op::HuberMean {
                pred,
                target: target.clone(),
                delta,
            },
            Tensor::scalar(acc / n),
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse_mean(&mut self, pred: NodeId, target: &Tensor<T>) -> Result<NodeId, AutodiffError> {
        if self.value(pred).shape() != target.shape() {
            return Err(shape_err(
                "mse_mean",
                format!("{:?} vs {:?}", self.value(pred).shape(), target.shape()),
            ));
        }
        let mut acc = T::ZERO;
        for (&p, &t) in self.value(pred).data().iter().zip(target.data()) {
            let r = p - t;
            acc += r * r;
        }
        let n = T::from_f64(target.len() as f64);
        Ok(self.push(
            Op::MseMean {
                pred,
                target: target.clone(),
            },
            Tensor::scalar(acc / n),
        ))
    }

    /// Smoothed total variation: per image sum of
    /// sqrt(dv^2 + dh^2 + eps^2) over pixels, then mean over the batch.
    /// Out-of-range neighbor differences are zero.
    pub fn tv_mean(&mut self, pred: NodeId) -> Result<NodeId, AutodiffError> {
        let (bn, c, h, w) = self.value(pred).dims4();
        if c != 1 {
            return Err(shape_err(
                "tv_mean",
                format!("expected single-channel input, got {} channels", c),
            ));
        }
        let eps = T::from_f64(TV_EPS);
        let xd = self.value(pred).data();
        let mut acc = T::ZERO;
        for item in 0..bn {
            let img = &xd[item * h * w..(item + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    let v = img[i * w + j];
                    let dv = if i > 0 { v - img[(i - 1) * w + j] } else { T::ZERO };
                    let dh = if j > 0 { v - img[i * w + j - 1] } else { T::ZERO };
                    acc += (dv * dv + dh * dh + eps * eps).sqrt();
                }
            }
        }
        let n = T::from_f64(bn as f64);
        Ok(self.push(Op::TvMean { pred, eps }, Tensor::scalar(acc / n)))
    }

    // -------------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar node; gradients accumulate into every
    /// node that contributed to it.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(T::ONE));
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            self.step_backward(i);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, update: impl FnOnce(&mut [T])) {
        self.accumulate_with_value(id, |g, _| update(g));
    }

    /// Accumulate into a node's grad with read access to that node's value.
    fn accumulate_with_value(&mut self, id: NodeId, update: impl FnOnce(&mut [T], &[T])) {
        if self.nodes[id.0].grad.is_none() {
            let shape = self.nodes[id.0].value.shape().to_vec();
            self.nodes[id.0].grad = Some(Tensor::zeros(&shape));
        }
        let Node { value, grad, .. } = &mut self.nodes[id.0];
        update(grad.as_mut().unwrap().data_mut(), value.data());
    }

    fn step_backward(&mut self, i: usize) {
        // Take the output grad out to satisfy the borrow checker; the op
        // match puts contributions into the input nodes.
        let g = self.nodes[i].grad.take().unwrap();
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => self.conv2d_backward(*x, *w, *b, &g),
            Op::UpConv2d { x, w } => self.upconv2d_backward(*x, *w, &g),
            Op::MaxPool2d { x, argmax } => {
                let gd = g.data();
                self.accumulate(*x, |dx| {
                    for (gv, &src) in gd.iter().zip(argmax.iter()) {
                        dx[src as usize] += *gv;
                    }
                });
            }
            Op::Concat { a, b } => {
                let (ba, ca, ha, wa) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let hw = ha * wa;
                let gd = g.data();
                self.accumulate(*a, |da| {
                    for item in 0..ba {
                        let src = item * (ca + cb) * hw;
                        for (dv, gv) in da[item * ca * hw..(item + 1) * ca * hw]
                            .iter_mut()
                            .zip(&gd[src..src + ca * hw])
                        {
                            *dv += *gv;
                        }
                    }
                });
                self.accumulate(*b, |db| {
                    for item in 0..ba {
                        let src = item * (ca + cb) * hw + ca * hw;
                        for (dv, gv) in db[item * cb * hw..(item + 1) * cb * hw]
                            .iter_mut()
                            .zip(&gd[src..src + cb * hw])
                        {
                            *dv += *gv;
                        }
                    }
                });
            }
            Op::SliceChannels { x, start, count } => {
                let (bn, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let gd = g.data();
                self.accumulate(*x, |dx| {
                    for item in 0..bn {
                        let dst = item * c * hw + start * hw;
                        for (dv, gv) in dx[dst..dst + count * hw]
                            .iter_mut()
                            .zip(&gd[item * count * hw..(item + 1) * count * hw])
                        {
                            *dv += *gv;
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                let gd = g.data();
                self.accumulate(*a, |da| {
                    for (dv, gv) in da.iter_mut().zip(gd) {
                        *dv += *gv;
                    }
                });
                self.accumulate(*b, |db| {
                    for (dv, gv) in db.iter_mut().zip(gd) {
                        *dv += *gv;
                    }
                });
            }
            Op::Swish { x } => {
                let gd = g.data();
                self.accumulate_with_value(*x, |dx, xv| {
                    for ((dv, gv), &v) in dx.iter_mut().zip(gd).zip(xv) {
                        let s = sigmoid_scalar(v);
                        let f = v * s;
                        *dv += *gv * (f + s * (T::ONE - f));
                    }
                });
            }
            Op::Relu { x } => {
                let gd = g.data();
                self.accumulate_with_value(*x, |dx, xv| {
                    for ((dv, gv), &v) in dx.iter_mut().zip(gd).zip(xv) {
                        if v > T::ZERO {
                            *dv += *gv;
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let gd = g.data();
                self.accumulate_with_value(*x, |dx, xv| {
                    for ((dv, gv), &v) in dx.iter_mut().zip(gd).zip(xv) {
                        let s = sigmoid_scalar(v);
                        *dv += *gv * s * (T::ONE - s);
                    }
                });
            }
            Op::Square { x } => {
                let two = T::from_f64(2.0);
                let gd = g.data();
                self.accumulate_with_value(*x, |dx, xv| {
                    for ((dv, gv), &v) in dx.iter_mut().zip(gd).zip(xv) {
                        *dv += *gv * two * v;
                    }
                });
            }
            Op::Lincomb { terms } => {
                let gd = g.data();
                for &(id, c) in terms {
                    self.accumulate(id, |dt| {
                        for (dv, gv) in dt.iter_mut().zip(gd) {
                            *dv += c * *gv;
                        }
                    });
                }
            }
            Op::HuberMean {
                pred,
                target,
                delta,
            } => {
                let gs = g.item() / T::from_f64(target.len() as f64);
                let (tv, delta) = (target.data(), *delta);
                self.accumulate_with_value(*pred, |dp, pv| {
                    for ((dv, &p), &t) in dp.iter_mut().zip(pv).zip(tv) {
                        let r = p - t;
                        let dr = if r.abs() <= delta {
                            r
                        } else if r > T::ZERO {
                            delta
                        } else {
                            -delta
                        };
                        *dv += gs * dr;
                    }
                });
            }
            Op::MseMean { pred, target } => {
                let gs = g.item() * T::from_f64(2.0 / target.len() as f64);
                let tv = target.data();
                self.accumulate_with_value(*pred, |dp, pv| {
                    for ((dv, &p), &t) in dp.iter_mut().zip(pv).zip(tv) {
                        *dv += gs * (p - t);
                    }
                });
            }
            Op::TvMean { pred, eps } => {
                let (bn, _, h, w) = self.value(*pred).dims4();
                let gs = g.item() / T::from_f64(bn as f64);
                let eps = *eps;
                self.accumulate_with_value(*pred, |dx, xv| {
                    for item in 0..bn {
                        let img = &xv[item * h * w..(item + 1) * h * w];
                        let dimg = &mut dx[item * h * w..(item + 1) * h * w];
                        for i in 0..h {
                            for j in 0..w {
                                let v = img[i * w + j];
                                let dv = if i > 0 { v - img[(i - 1) * w + j] } else { T::ZERO };
                                let dh = if j > 0 { v - img[i * w + j - 1] } else { T::ZERO };
                                let t = (dv * dv + dh * dh + eps * eps).sqrt();
                                let s = gs / t;
                                dimg[i * w + j] += s * (dv + dh);
                                if i > 0 {
                                    dimg[(i - 1) * w + j] += -s * dv;
                                }
                                if j > 0 {
                                    dimg[i * w + j - 1] += -s * dh;
                                }
                            }
                        }
                    }
                });
            }
        }
        self.nodes[i].op = op;
        self.nodes[i].grad = Some(g);
    }

    fn conv2d_backward(&mut self, x: NodeId, w: NodeId, b: NodeId, g: &Tensor<T>) {
        let (bn, cin, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        let (cout, k) = (ws[0], ws[2]);
        let hw = h * wd;
        let ckk = cin * k * k;

        let mut col = vec![T::ZERO; ckk * hw];
        let mut dw = vec![T::ZERO; cout * ckk];
        let mut db = vec![T::ZERO; cout];
        let mut dcol = vec![T::ZERO; ckk * hw];
        let mut dx = vec![T::ZERO; bn * cin * hw];
        let gd = g.data();
        let xd = self.value(x).data();
        let wd_ = self.value(w).data();
        for item in 0..bn {
            let gs = &gd[item * cout * hw..(item + 1) * cout * hw];
            let xs = &xd[item * cin * hw..(item + 1) * cin * hw];
            im2col(xs, cin, h, wd, k, &mut col);
            unsafe {
                // dW += dY * col^T
                T::gemm(
                    cout,
                    hw,
                    ckk,
                    T::ONE,
                    gs.as_ptr(),
                    hw as isize,
                    1,
                    col.as_ptr(),
                    1,
                    hw as isize,
                    T::ONE,
                    dw.as_mut_ptr(),
                    ckk as isize,
                    1,
                );
                // dcol = W^T * dY
                T::gemm(
                    ckk,
                    cout,
                    hw,
                    T::ONE,
                    wd_.as_ptr(),
                    1,
                    ckk as isize,
                    gs.as_ptr(),
                    hw as isize,
                    1,
                    T::ZERO,
                    dcol.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
            col2im_add(&dcol, cin, h, wd, k, &mut dx[item * cin * hw..(item + 1) * cin * hw]);
            for c in 0..cout {
                let mut acc = T::ZERO;
                for &gv in &gs[c * hw..(c + 1) * hw] {
                    acc += gv;
                }
                db[c] += acc;
            }
        }
        self.accumulate(x, |d| {
            for (dv, sv) in d.iter_mut().zip(&dx) {
                *dv += *sv;
            }
        });
        self.accumulate(w, |d| {
            for (dv, sv) in d.iter_mut().zip(&dw) {
                *dv += *sv;
            }
        });
        self.accumulate(b, |d| {
            for (dv, sv) in d.iter_mut().zip(&db) {
                *dv += *sv;
            }
        });
    }

    fn upconv2d_backward(&mut self, x: NodeId, w: NodeId, g: &Tensor<T>) {
        let (bn, cin, h, wd) = self.value(x).dims4();
        let cout = self.value(w).shape()[1];
        let hw = h * wd;
        let mut dtmp = vec![T::ZERO; cout * 4 * hw];
        let mut dx = vec![T::ZERO; bn * cin * hw];
        let mut dw = vec![T::ZERO; cin * cout * 4];
        let gd = g.data();
        let xd = self.value(x).data();
        let wv = self.value(w).data();
        for item in 0..bn {
            let gs = &gd[item * cout * 4 * hw..(item + 1) * cout * 4 * hw];
            gather_2x2(gs, cout, h, wd, &mut dtmp);
            let xs = &xd[item * cin * hw..(item + 1) * cin * hw];
            unsafe {
                // dX = W * dtmp
                T::gemm(
                    cin,
                    cout * 4,
                    hw,
                    T::ONE,
                    wv.as_ptr(),
                    (cout * 4) as isize,
                    1,
                    dtmp.as_ptr(),
                    hw as isize,
                    1,
                    T::ZERO,
                    dx[item * cin * hw..(item + 1) * cin * hw].as_mut_ptr(),
                    hw as isize,
                    1,
                );
                // dW += x * dtmp^T
                T::gemm(
                    cin,
                    hw,
                    cout * 4,
                    T::ONE,
                    xs.as_ptr(),
                    hw as isize,
                    1,
                    dtmp.as_ptr(),
                    1,
                    hw as isize,
                    T::ONE,
                    dw.as_mut_ptr(),
                    (cout * 4) as isize,
                    1,
                );
            }
        }
        self.accumulate(x, |d| {
            for (dv, sv) in d.iter_mut().zip(&dx) {
                *dv += *sv;
            }
        });
        self.accumulate(w, |d| {
            for (dv, sv) in d.iter_mut().zip(&dw) {
                *dv += *sv;
            }
        });
    }
}

/// Smoothing constant inside the TV square root; keeps the gradient defined
/// on flat regions while leaving hand-computed examples intact to ~7 digits.
pub const TV_EPS: f64 = 1e-8;

#[inline]
fn sigmoid_scalar<T: Element>(v: T) -> T {
    T::ONE / (T::ONE + (-v).exp())
}

/// Unfold [c, h, w] into [c*k*k, h*w] with zero same-padding.
fn im2col<T: Element>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut col[row + y * w..row + (y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let src_row = ci * hw + sy as usize * w;
                    // valid x range: 0 <= x + dx < w
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx.max(0)) as usize;
                    dst[..x0].fill(T::ZERO);
                    dst[x1..].fill(T::ZERO);
                    let src0 = (x0 as isize + dx) as usize;
                    dst[x0..x1].copy_from_slice(&x[src_row + src0..src_row + src0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Scatter-add the adjoint of [`im2col`]: fold [c*k*k, h*w] back into [c, h, w].
fn col2im_add<T: Element>(col: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &col[row + y * w..row + (y + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx.max(0)) as usize;
                    let dst_row = ci * hw + sy as usize * w;
                    let dst0 = (x0 as isize + dx) as usize;
                    for (xi, &sv) in x[dst_row + dst0..dst_row + dst0 + (x1 - x0)]
                        .iter_mut()
                        .zip(&src[x0..x1])
                    {
                        *xi += sv;
                    }
                }
            }
        }
    }
}

/// Place tmp[(c, dy, dx), (y, x)] at out[c, 2y+dy, 2x+dx].
fn scatter_2x2<T: Element>(tmp: &[T], cout: usize, h: usize, w: usize, out: &mut [T]) {
    let hw = h * w;
    let (h2, w2) = (2 * h, 2 * w);
    for c in 0..cout {
        for dy in 0..2 {
            for dx in 0..2 {
                let src = ((c * 2 + dy) * 2 + dx) * hw;
                for y in 0..h {
                    for x in 0..w {
                        out[c * h2 * w2 + (2 * y + dy) * w2 + 2 * x + dx] =
                            tmp[src + y * w + x];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`scatter_2x2`]: gather grad[c, 2y+dy, 2x+dx] into tmp layout.
fn gather_2x2<T: Element>(g: &[T], cout: usize, h: usize, w: usize, tmp: &mut [T]) {
    let hw = h * w;
    let (h2, w2) = (2 * h, 2 * w);
    for c in 0..cout {
        for dy in 0..2 {
            for dx in 0..2 {
                let dst = ((c * 2 + dy) * 2 + dx) * hw;
                for y in 0..h {
                    for x in 0..w {
                        tmp[dst + y * w + x] =
                            g[c * h2 * w2 + (2 * y + dy) * w2 + 2 * x + dx];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t<T: Element>(shape: &[usize], v: Vec<f64>) -> Tensor<T> {
        Tensor::new(shape, v.into_iter().map(T::from_f64).collect()).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 1, 4, 4], (0..16).map(|v| v as f64).collect()));
        // impulse at kernel center
        let mut wv = vec![0.0; 9];
        wv[4] = 1.0;
        let w = g.leaf(t(&[1, 1, 3, 3], wv));
        let b = g.leaf(t(&[1], vec![0.0]));
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv2d_ones_kernel_interior_sums_9() {
        // constant input c=2.0, all-ones 3x3 kernel, 5x5 grid: interior = 18
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1, 1, 5, 5], 2.0));
        let w = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.leaf(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b).unwrap();
        let yd = g.value(y).data();
        assert_eq!(yd[2 * 5 + 2], 18.0);
        // corner sees a 2x2 valid window
        assert_eq!(yd[0], 8.0);
    }

    #[test]
    fn conv2d_two_input_channels_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1, 2, 5, 5], 1.0));
        let w = g.leaf(Tensor::full(&[1, 2, 3, 3], 1.0));
        let b = g.leaf(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).data()[2 * 5 + 2], 18.0);
    }

    #[test]
    fn maxpool_basic_and_shape() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2d(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 4.0);
        let odd = g.leaf(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(g.maxpool2d(odd).is_err());
    }

    #[test]
    fn maxpool_constant_input() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1, 2, 4, 4], 3.5));
        let y = g.maxpool2d(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn upconv_ones_kernel_replicates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let w = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.upconv2d(x, w).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 4, 4]);
        let yd = g.value(y).data();
        assert_eq!(&yd[0..4], &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(&yd[12..16], &[3.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn upconv_output_shape_law() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 4, 4]));
        let w = g.leaf(Tensor::zeros(&[1, 3, 2, 2]));
        let y = g.upconv2d(x, w).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 8, 8]);
    }

    #[test]
    fn concat_shape_and_slice_inverse() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::full(&[1, 2, 3, 3], 1.0));
        let b = g.leaf(Tensor::full(&[1, 3, 3, 3], 2.0));
        let y = g.concat(a, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 5, 3, 3]);
        let sa = g.slice_channels(y, 0, 2).unwrap();
        let sb = g.slice_channels(y, 2, 3).unwrap();
        assert_eq!(g.value(sa).data(), g.value(a).data());
        assert_eq!(g.value(sb).data(), g.value(b).data());
        let c = g.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(g.concat(a, c).is_err());
    }

    #[test]
    fn add_identities() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]));
        let z = g.leaf(Tensor::zeros(&[2, 2]));
        let y = g.add(a, z).unwrap();
        assert_eq!(g.value(y).data(), g.value(a).data());
        let na = g.leaf(g.value(a).map(|v| -v));
        let y2 = g.add(a, na).unwrap();
        assert!(g.value(y2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swish_reference_values() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], vec![0.0, 1.0, 20.0]));
        let y = g.swish(x);
        let yd = g.value(y).data();
        assert_eq!(yd[0], 0.0);
        // 1/(1+e^-1), high-precision reference
        assert!((yd[1] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((yd[2] - 20.0).abs() < 1e-7);
    }

    #[test]
    fn sigmoid_symmetry() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[4], vec![0.0, 1.3, -1.3, 700.0]));
        let y = g.sigmoid(x);
        let yd = g.value(y).data();
        assert_eq!(yd[0], 0.5);
        assert!((yd[1] + yd[2] - 1.0).abs() < 1e-12);
        assert_eq!(yd[3], 1.0); // saturates without NaN
    }

    #[test]
    fn diamond_topology_accumulates() {
        // d/dx (x + x) = 2
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn tv_examples_from_stencil() {
        let mut g = Graph::<f64>::new();
        // constant image -> h*w*eps
        let x = g.leaf(Tensor::full(&[1, 1, 3, 3], 5.0));
        let y = g.tv_mean(x).unwrap();
        assert!((g.value(y).item() - 9.0 * TV_EPS).abs() < 1e-20);
        // [[0,1],[0,1]] -> 2 + 2*eps (two unit horizontal jumps)
        let x2 = g.leaf(t(&[1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]));
        let y2 = g.tv_mean(x2).unwrap();
        assert!((g.value(y2).item() - (2.0 * (1.0 + TV_EPS * TV_EPS).sqrt() + 2.0 * TV_EPS)).abs() < 1e-12);
        // single 5 in a zero 3x3 -> 5 + 5 + 5*sqrt(2) plus 6 eps terms
        let mut v = vec![0.0; 9];
        v[4] = 5.0;
        let x3 = g.leaf(t(&[1, 1, 3, 3], v));
        let y3 = g.tv_mean(x3).unwrap();
        let expect = 5.0 * 2.0f64.sqrt() + 5.0 + 5.0 + 6.0 * TV_EPS;
        assert!((g.value(y3).item() - expect).abs() < 1e-6);
    }

    #[test]
    fn batch_forward_is_per_item() {
        // two identical samples produce identical output slices
        let mut g = Graph::<f64>::new();
        let one: Vec<f64> = (0..9).map(|v| v as f64 * 0.3 - 1.0).collect();
        let mut two = one.clone();
        two.extend_from_slice(&one);
        let x = g.leaf(t(&[2, 1, 3, 3], two));
        let w = g.leaf(t(&[2, 1, 3, 3], (0..18).map(|v| v as f64 * 0.1).collect()));
        let b = g.leaf(t(&[2], vec![0.1, -0.2]));
        let y = g.conv2d(x, w, b).unwrap();
        let yd = g.value(y).data();
        assert_eq!(&yd[..18], &yd[18..]);
    }
}
