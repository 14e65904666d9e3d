//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly and
//! records how to push gradients back to its inputs; [`Graph::backward`]
//! walks the tape once in reverse. Graphs are cheap to build and are meant to
//! be thrown away after each forward/backward pass, so evaluation is
//! reentrant: nothing is shared between two graphs.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// 2-D convolution hyper-parameters (stride is always 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvOpts {
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvOpts {
    /// Padding that keeps the spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            padding: dilation * (kernel - 1) / 2,
            dilation,
            groups: 1,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulBroadcast(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        opts: ConvOpts,
    },
    Filter {
        x: Var,
        kernel: Rc<Tensor>,
        padding: usize,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    ChannelMean(Var),
    ChannelMax(Var, Vec<usize>),
    Mean(Var),
    Sum(Var),
    Softmax(Var),
    WeightedSum(Var, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` if `v` does not influence the output.
    pub fn wrt(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!(
        "{op}: incompatible shapes {:?} and {:?}",
        a.shape(),
        b.shape()
    ))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("add", x, y));
        }
        let out = x.zip_map(y, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("sub", x, y));
        }
        let out = x.zip_map(y, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("mul", x, y));
        }
        let out = x.zip_map(y, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("div", x, y));
        }
        let out = x.zip_map(y, |p, q| p / q);
        Ok(self.push(out, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a))
    }

    /// Elementwise product where `gate` broadcasts over size-1 axes of a rank-4 `a`.
    pub fn mul_broadcast(&mut self, a: Var, gate: Var) -> Result<Var> {
        let (x, g) = (self.value(a), self.value(gate));
        let strides = broadcast_strides(x, g).ok_or_else(|| shape_err("mul_broadcast", x, g))?;
        let (n, c, h, w) = x.dims4()?;
        let mut out = x.clone();
        let gd = g.data();
        let od = out.data_mut();
        let mut i = 0;
        for ni in 0..n {
            for ci in 0..c {
                for yi in 0..h {
                    for xi in 0..w {
                        od[i] *= gd
                            [ni * strides[0] + ci * strides[1] + yi * strides[2] + xi * strides[3]];
                        i += 1;
                    }
                }
            }
        }
        Ok(self.push(out, Op::MulBroadcast(a, gate)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a))
    }

    /// Stride-1 convolution (cross-correlation) of `[n, cin, h, w]` with `[cout, cin / groups, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: ConvOpts) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, cin, h, wd) = xv.dims4()?;
        let (cout, cin_g, kh, kw) = wv.dims4()?;
        if opts.groups == 0
            || cin % opts.groups != 0
            || cout % opts.groups != 0
            || cin / opts.groups != cin_g
        {
            return Err(shape_err("conv2d", xv, wv));
        }
        let ho = (h + 2 * opts.padding).checked_sub(opts.dilation * (kh - 1));
        let wo = (wd + 2 * opts.padding).checked_sub(opts.dilation * (kw - 1));
        let (ho, wo) = match (ho, wo) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(shape_err("conv2d", xv, wv)),
        };
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(shape_err("conv2d bias", wv, self.value(b)));
            }
        }
        let mut out = Tensor::zeros(vec![n, cout, ho, wo]);
        let cout_g = cout / opts.groups;
        let wdata = wv.data();
        for ni in 0..n {
            for oc in 0..cout {
                let g = oc / cout_g;
                let plane = out.plane_mut(ni, oc);
                if let Some(b) = b {
                    let bias = self.nodes[b.0].value.data()[oc];
                    plane.iter_mut().for_each(|v| *v = bias);
                }
                for icg in 0..cin_g {
                    let ic = g * cin_g + icg;
                    let xp = xv.plane(ni, ic);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wval = wdata[((oc * cin_g + icg) * kh + ky) * kw + kx];
                            let dy = (ky * opts.dilation) as isize - opts.padding as isize;
                            let dx = (kx * opts.dilation) as isize - opts.padding as isize;
                            shifted_axpy(plane, ho, wo, xp, h, wd, wval, dy, dx);
                        }
                    }
                }
            }
        }
        Ok(self.push(out, Op::Conv2d { x, w, b, opts }))
    }

    /// Correlates every channel with the same fixed 2-D `kernel` (zero padding).
    /// With `padding = 0` only fully covered ("valid") positions are produced.
    pub fn filter(&mut self, x: Var, kernel: Rc<Tensor>, padding: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let (kh, kw) = match kernel.shape() {
            [a, b] => (*a, *b),
            s => {
                return Err(Error::Shape(format!(
                    "filter kernel must be 2-D, got {s:?}"
                )))
            }
        };
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Shape(format!(
                "filter {kh}x{kw} larger than padded input {h}x{w}"
            )));
        }
        let (ho, wo) = (h + 2 * padding - kh + 1, w + 2 * padding - kw + 1);
        let mut out = Tensor::zeros(vec![n, c, ho, wo]);
        for ni in 0..n {
            for ci in 0..c {
                let xp = xv.plane(ni, ci);
                let plane = out.plane_mut(ni, ci);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kval = kernel.data()[ky * kw + kx];
                        shifted_axpy(
                            plane,
                            ho,
                            wo,
                            xp,
                            h,
                            w,
                            kval,
                            ky as isize - padding as isize,
                            kx as isize - padding as isize,
                        );
                    }
                }
            }
        }
        Ok(self.push(out, Op::Filter { x, kernel, padding }))
    }

    /// 2x2 average pooling with stride 2; height and width must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let xv = self.value(a);
        let (n, c, h, w) = xv.dims4()?;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::ImageSize {
                height: h,
                width: w,
                reason: "2x2 pooling needs even dimensions".into(),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(vec![n, c, ho, wo]);
        for ni in 0..n {
            for ci in 0..c {
                let xp = xv.plane(ni, ci);
                let op = out.plane_mut(ni, ci);
                for y in 0..ho {
                    for x in 0..wo {
                        let i = 2 * y * w + 2 * x;
                        op[y * wo + x] = 0.25 * (xp[i] + xp[i + 1] + xp[i + w] + xp[i + w + 1]);
                    }
                }
            }
        }
        Ok(self.push(out, Op::AvgPool2(a)))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let xv = self.value(a);
        let (n, c, h, w) = xv.dims4()?;
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(vec![n, c, ho, wo]);
        for ni in 0..n {
            for ci in 0..c {
                let xp = xv.plane(ni, ci);
                let op = out.plane_mut(ni, ci);
                for y in 0..ho {
                    for x in 0..wo {
                        op[y * wo + x] = xp[(y / 2) * w + x / 2];
                    }
                }
            }
        }
        Ok(self.push(out, Op::Upsample2(a)))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let (n, _, h, w) = first.dims4()?;
        let mut channels = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err("concat", first, self.value(p)));
            }
            channels += pc;
        }
        let mut out = Tensor::zeros(vec![n, channels, h, w]);
        for ni in 0..n {
            let mut oc = 0;
            for &p in parts {
                let pv = &self.nodes[p.0].value;
                let pc = pv.shape()[1];
                for ci in 0..pc {
                    out.plane_mut(ni, oc).copy_from_slice(pv.plane(ni, ci));
                    oc += 1;
                }
            }
        }
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let xv = self.value(a);
        let (n, c, h, w) = xv.dims4()?;
        let mut data = Vec::with_capacity(n * c);
        for ni in 0..n {
            for ci in 0..c {
                data.push(xv.plane(ni, ci).iter().sum::<f64>() / (h * w) as f64);
            }
        }
        let out = Tensor::new(vec![n, c, 1, 1], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(a)))
    }

    /// Mean over channels: `[n, c, h, w] -> [n, 1, h, w]`.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let xv = self.value(a);
        let (n, c, h, w) = xv.dims4()?;
        let mut out = Tensor::zeros(vec![n, 1, h, w]);
        for ni in 0..n {
            for ci in 0..c {
                let xp = xv.plane(ni, ci);
                for (o, v) in out.plane_mut(ni, 0).iter_mut().zip(xp) {
                    *o += v / c as f64;
                }
            }
        }
        Ok(self.push(out, Op::ChannelMean(a)))
    }

    /// Max over channels; the gradient flows to the first maximal channel.
    pub fn channel_max(&mut self, a: Var) -> Result<Var> {
        let xv = self.value(a);
        let (n, c, h, w) = xv.dims4()?;
        let mut out = Tensor::full(vec![n, 1, h, w], f64::NEG_INFINITY);
        let mut arg = vec![0usize; n * h * w];
        for ni in 0..n {
            for ci in 0..c {
                let xp = xv.plane(ni, ci);
                let op = out.plane_mut(ni, 0);
                for i in 0..h * w {
                    if xp[i] > op[i] {
                        op[i] = xp[i];
                        arg[ni * h * w + i] = ci;
                    }
                }
            }
        }
        Ok(self.push(out, Op::ChannelMax(a, arg)))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Exponential normalization of a 1-D vector.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = Tensor::from_vec(softmax(self.value(a).data()));
        self.push(out, Op::Softmax(a))
    }

    /// `sum_i weights[i] * parts[i]`, accumulated in index order.
    pub fn weighted_sum(&mut self, weights: Var, parts: &[Var]) -> Result<Var> {
        let wv = self.value(weights);
        if wv.numel() != parts.len() || parts.is_empty() {
            return Err(Error::Shape(format!(
                "weighted_sum: {} weights for {} parts",
                wv.numel(),
                parts.len()
            )));
        }
        let shape = self.value(parts[0]).shape().to_vec();
        let mut out = Tensor::zeros(shape.clone());
        for (i, &p) in parts.iter().enumerate() {
            let pv = self.value(p);
            if pv.shape() != shape.as_slice() {
                return Err(shape_err("weighted_sum", self.value(parts[0]), pv));
            }
            let wi = self.value(weights).data()[i];
            for (o, v) in out.data_mut().iter_mut().zip(pv.data()) {
                *o += wi * v;
            }
        }
        Ok(self.push(out, Op::WeightedSum(weights, parts.to_vec())))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let s = self.square(d);
        Ok(self.mean(s))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(self.value(output).shape().to_vec(), 1.0));
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(val(*b), |p, q| p * q));
                accumulate(grads, *b, g.zip_map(val(*a), |p, q| p * q));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                accumulate(grads, *a, g.zip_map(bv, |p, q| p / q));
                let t = g.zip_map(&node.value, |p, o| p * o);
                accumulate(grads, *b, t.zip_map(bv, |p, q| -p / q));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::MulBroadcast(a, gate) => {
                let (av, gv) = (val(*a), val(*gate));
                let strides = broadcast_strides(av, gv).expect("checked in forward");
                let (n, c, h, w) = av.dims4().expect("rank-4");
                let mut ga = g.clone();
                let mut gg = Tensor::zeros(gv.shape().to_vec());
                let mut i = 0;
                for ni in 0..n {
                    for ci in 0..c {
                        for yi in 0..h {
                            for xi in 0..w {
                                let gi = ni * strides[0]
                                    + ci * strides[1]
                                    + yi * strides[2]
                                    + xi * strides[3];
                                ga.data_mut()[i] = g.data()[i] * gv.data()[gi];
                                gg.data_mut()[gi] += g.data()[i] * av.data()[i];
                                i += 1;
                            }
                        }
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *gate, gg);
            }
            Op::Relu(a) => accumulate(
                grads,
                *a,
                g.zip_map(val(*a), |p, x| if x > 0.0 { p } else { 0.0 }),
            ),
            Op::Sigmoid(a) => {
                accumulate(grads, *a, g.zip_map(&node.value, |p, s| p * s * (1.0 - s)))
            }
            Op::Softplus(a) => accumulate(grads, *a, g.zip_map(val(*a), |p, x| p * sigmoid(x))),
            Op::Square(a) => accumulate(grads, *a, g.zip_map(val(*a), |p, x| 2.0 * p * x)),
            Op::Conv2d { x, w, b, opts } => {
                let (gx, gw, gb) = conv2d_backward(val(*x), val(*w), g, *opts);
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
                if let Some(b) = b {
                    accumulate(grads, *b, gb);
                }
            }
            Op::Filter { x, kernel, padding } => {
                let xv = val(*x);
                let (n, c, h, w) = xv.dims4().expect("rank-4");
                let (_, _, ho, wo) = g.dims4().expect("rank-4");
                let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
                let mut gx = Tensor::zeros(xv.shape().to_vec());
                for ni in 0..n {
                    for ci in 0..c {
                        let gp = g.plane(ni, ci);
                        let gxp = gx.plane_mut(ni, ci);
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let kval = kernel.data()[ky * kw + kx];
                                shifted_axpy_transpose(
                                    gxp,
                                    h,
                                    w,
                                    gp,
                                    ho,
                                    wo,
                                    kval,
                                    ky as isize - *padding as isize,
                                    kx as isize - *padding as isize,
                                );
                            }
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::AvgPool2(a) => {
                let av = val(*a);
                let (n, c, h, w) = av.dims4().expect("rank-4");
                let wo = w / 2;
                let mut ga = Tensor::zeros(av.shape().to_vec());
                for ni in 0..n {
                    for ci in 0..c {
                        let gp = g.plane(ni, ci);
                        let gap = ga.plane_mut(ni, ci);
                        for y in 0..h {
                            for x in 0..w {
                                gap[y * w + x] = 0.25 * gp[(y / 2) * wo + x / 2];
                            }
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Upsample2(a) => {
                let av = val(*a);
                let (n, c, h, w) = av.dims4().expect("rank-4");
                let wo = 2 * w;
                let mut ga = Tensor::zeros(av.shape().to_vec());
                for ni in 0..n {
                    for ci in 0..c {
                        let gp = g.plane(ni, ci);
                        let gap = ga.plane_mut(ni, ci);
                        for y in 0..2 * h {
                            for x in 0..wo {
                                gap[(y / 2) * w + x / 2] += gp[y * wo + x];
                            }
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Concat(parts) => {
                let n = g.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let pc = pv.shape()[1];
                    let mut gp = Tensor::zeros(pv.shape().to_vec());
                    for ni in 0..n {
                        for ci in 0..pc {
                            gp.plane_mut(ni, ci)
                                .copy_from_slice(g.plane(ni, offset + ci));
                        }
                    }
                    offset += pc;
                    accumulate(grads, p, gp);
                }
            }
            Op::GlobalAvgPool(a) => {
                let av = val(*a);
                let (n, c, h, w) = av.dims4().expect("rank-4");
                let mut ga = Tensor::zeros(av.shape().to_vec());
                for ni in 0..n {
                    for ci in 0..c {
                        let v = g.data()[ni * c + ci] / (h * w) as f64;
                        ga.plane_mut(ni, ci).iter_mut().for_each(|x| *x = v);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ChannelMean(a) => {
                let av = val(*a);
                let (n, c, _, _) = av.dims4().expect("rank-4");
                let mut ga = Tensor::zeros(av.shape().to_vec());
                for ni in 0..n {
                    let gp = g.plane(ni, 0).to_vec();
                    for ci in 0..c {
                        for (o, v) in ga.plane_mut(ni, ci).iter_mut().zip(&gp) {
                            *o = v / c as f64;
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ChannelMax(a, arg) => {
                let av = val(*a);
                let (n, _, h, w) = av.dims4().expect("rank-4");
                let mut ga = Tensor::zeros(av.shape().to_vec());
                for ni in 0..n {
                    let gp = g.plane(ni, 0).to_vec();
                    for i in 0..h * w {
                        let ci = arg[ni * h * w + i];
                        ga.plane_mut(ni, ci)[i] += gp[i];
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Mean(a) => {
                let av = val(*a);
                let v = g.item() / av.numel() as f64;
                accumulate(grads, *a, Tensor::full(av.shape().to_vec(), v));
            }
            Op::Sum(a) => {
                let av = val(*a);
                accumulate(grads, *a, Tensor::full(av.shape().to_vec(), g.item()));
            }
            Op::Softmax(a) => {
                let s = &node.value;
                let inner = s.dot(g);
                accumulate(grads, *a, s.zip_map(g, |si, gi| si * (gi - inner)));
            }
            Op::WeightedSum(weights, parts) => {
                let wv = val(*weights);
                let mut gw = Vec::with_capacity(parts.len());
                for (i, &p) in parts.iter().enumerate() {
                    gw.push(g.dot(val(p)));
                    let wi = wv.data()[i];
                    accumulate(grads, p, g.map(|v| v * wi));
                }
                accumulate(
                    grads,
                    *weights,
                    Tensor::new(wv.shape().to_vec(), gw).expect("same length"),
                );
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable exponential normalization.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn broadcast_strides(a: &Tensor, g: &Tensor) -> Option<[usize; 4]> {
    let (a_shape, g_shape) = (a.shape(), g.shape());
    if a_shape.len() != 4 || g_shape.len() != 4 {
        return None;
    }
    let mut strides = [0usize; 4];
    let mut stride = 1;
    for axis in (0..4).rev() {
        if g_shape[axis] == a_shape[axis] {
            strides[axis] = stride;
        } else if g_shape[axis] != 1 {
            return None;
        }
        stride *= g_shape[axis];
    }
    Some(strides)
}

/// `out[y, x] += wval * input[y + dy, x + dx]` over every in-bounds position.
#[allow(clippy::too_many_arguments)]
fn shifted_axpy(
    out: &mut [f64],
    ho: usize,
    wo: usize,
    input: &[f64],
    h: usize,
    w: usize,
    wval: f64,
    dy: isize,
    dx: isize,
) {
    let (y0, y1) = valid_range(ho, h, dy);
    let (x0, x1) = valid_range(wo, w, dx);
    if x0 >= x1 {
        return;
    }
    for oy in y0..y1 {
        let iy = (oy as isize + dy) as usize;
        let orow = &mut out[oy * wo + x0..oy * wo + x1];
        let start = (x0 as isize + dx) as usize;
        let irow = &input[iy * w + start..iy * w + start + (x1 - x0)];
        for (o, i) in orow.iter_mut().zip(irow) {
            *o += wval * i;
        }
    }
}

/// Adjoint of [`shifted_axpy`]: `gin[y + dy, x + dx] += wval * gout[y, x]`.
#[allow(clippy::too_many_arguments)]
fn shifted_axpy_transpose(
    gin: &mut [f64],
    h: usize,
    w: usize,
    gout: &[f64],
    ho: usize,
    wo: usize,
    wval: f64,
    dy: isize,
    dx: isize,
) {
    let (y0, y1) = valid_range(ho, h, dy);
    let (x0, x1) = valid_range(wo, w, dx);
    if x0 >= x1 {
        return;
    }
    for oy in y0..y1 {
        let iy = (oy as isize + dy) as usize;
        let start = (x0 as isize + dx) as usize;
        let grow = &gout[oy * wo + x0..oy * wo + x1];
        let irow = &mut gin[iy * w + start..iy * w + start + (x1 - x0)];
        for (i, gv) in irow.iter_mut().zip(grow) {
            *i += wval * gv;
        }
    }
}

/// `sum_{y, x} gout[y, x] * input[y + dy, x + dx]`.
#[allow(clippy::too_many_arguments)]
fn shifted_dot(
    gout: &[f64],
    ho: usize,
    wo: usize,
    input: &[f64],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
) -> f64 {
    let (y0, y1) = valid_range(ho, h, dy);
    let (x0, x1) = valid_range(wo, w, dx);
    if x0 >= x1 {
        return 0.0;
    }
    let mut acc = 0.0;
    for oy in y0..y1 {
        let iy = (oy as isize + dy) as usize;
        let start = (x0 as isize + dx) as usize;
        let grow = &gout[oy * wo + x0..oy * wo + x1];
        let irow = &input[iy * w + start..iy * w + start + (x1 - x0)];
        acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
    }
    acc
}

/// Output indices `o` in `[lo, hi)` with `0 <= o + shift < input_len`.
fn valid_range(out_len: usize, input_len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (input_len as isize - shift).clamp(0, out_len as isize) as usize;
    (lo.min(hi), hi)
}

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor, opts: ConvOpts) -> (Tensor, Tensor, Tensor) {
    let (n, _, h, wd) = x.dims4().expect("rank-4");
    let (cout, cin_g, kh, kw) = w.dims4().expect("rank-4");
    let (_, _, ho, wo) = g.dims4().expect("rank-4");
    let cout_g = cout / opts.groups;
    let mut gx = Tensor::zeros(x.shape().to_vec());
    let mut gw = Tensor::zeros(w.shape().to_vec());
    let mut gb = Tensor::zeros(vec![cout]);
    for ni in 0..n {
        for oc in 0..cout {
            let gp = g.plane(ni, oc);
            gb.data_mut()[oc] += gp.iter().sum::<f64>();
            let grp = oc / cout_g;
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((oc * cin_g + icg) * kh + ky) * kw + kx;
                        let dy = (ky * opts.dilation) as isize - opts.padding as isize;
                        let dx = (kx * opts.dilation) as isize - opts.padding as isize;
                        gw.data_mut()[widx] +=
                            shifted_dot(gp, ho, wo, x.plane(ni, ic), h, wd, dy, dx);
                        let wval = w.data()[widx];
                        shifted_axpy_transpose(
                            gx.plane_mut(ni, ic),
                            h,
                            wd,
                            gp,
                            ho,
                            wo,
                            wval,
                            dy,
                            dx,
                        );
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}
