//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Forward values are computed eagerly and recorded on a tape; `backward`
//! walks the tape in reverse and accumulates gradients for every reachable
//! node, including input leaves. That input gradient is what drives the
//! curriculum weight updates.

use crate::error::{LsclError, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// A recorded primitive application. Inputs always reference earlier nodes.
#[derive(Debug, Clone)]
enum Op {
    /// Leaf whose gradient the caller wants (images, parameters).
    Input,
    /// Leaf treated as data (labels, masks); still receives a gradient slot.
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    MaxPool2 {
        input: NodeId,
        /// Flat index of the winning element per output element, per plane.
        argmax: Vec<usize>,
    },
    Upsample2(NodeId),
    ConcatChannels(NodeId, NodeId),
    SoftmaxChannels(NodeId),
    Log(NodeId),
    Sum(NodeId),
    /// Per-(batch, channel) spatial sum: [b,c,h,w] -> [b,c].
    SumPlanes(NodeId),
    Mean(NodeId),
    Clamp {
        input: NodeId,
        lo: f64,
        hi: f64,
    },
    /// Select the channel given by the per-pixel label: [b,c,h,w] -> [b,h,w].
    OneHotSelect {
        input: NodeId,
        labels: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn bchw(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [b, c, h, w] => Ok((*b, *c, *h, *w)),
        other => Err(LsclError::shape(op, format!("expected rank-4, got {other:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor, context: &str) -> Result<NodeId> {
        value.check_finite(context)?;
        self.nodes.push(Node { op, value });
        Ok(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Input, value, "input")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Constant, value, "constant")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip(self.value(b), "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), v, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip(self.value(b), "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), v, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip(self.value(b), "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), v, "mul")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip(self.value(b), "div", |x, y| x / y)?;
        self.push(Op::Div(a, b), v, "div")
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), v, "scale")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v, "relu")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v, "log")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).data.iter().sum());
        self.push(Op::Sum(a), v, "sum")
    }

    /// Sum over the spatial plane of each (batch, channel): [b,c,h,w] -> [b,c].
    pub fn sum_planes(&mut self, a: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = bchw(&self.value(a).shape, "sum_planes")?;
        let plane = h * w;
        let src = &self.value(a).data;
        let mut v = Tensor::zeros(&[b, c]);
        for p in 0..b * c {
            v.data[p] = src[p * plane..(p + 1) * plane].iter().sum();
        }
        self.push(Op::SumPlanes(a), v, "sum_planes")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(Op::Mean(a), v, "mean")
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp { input: a, lo, hi }, v, "clamp")
    }

    /// 3x3 convolution, stride 1, zero padding 1, with bias. Spatial size
    /// is preserved.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (b, ci, h, w) = bchw(&self.value(input).shape, "conv2d")?;
        let ws = &self.value(weight).shape;
        let (co, wci, kh, kw) = bchw(ws, "conv2d")?;
        if wci != ci || kh != 3 || kw != 3 {
            return Err(LsclError::shape(
                "conv2d",
                format!("weight {ws:?} incompatible with input channels {ci} (need [co, {ci}, 3, 3])"),
            ));
        }
        if self.value(bias).shape != [co] {
            return Err(LsclError::shape(
                "conv2d",
                format!("bias {:?}, expected [{co}]", self.value(bias).shape),
            ));
        }
        let mut out = Tensor::zeros(&[b, co, h, w]);
        conv2d_forward(
            &self.value(input).data,
            &self.value(weight).data,
            &self.value(bias).data,
            &mut out.data,
            b,
            ci,
            co,
            h,
            w,
        );
        self.push(Op::Conv2d { input, weight, bias }, out, "conv2d")
    }

    /// 2x2 max pooling, stride 2. Height and width must be even.
    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = bchw(&self.value(input).shape, "maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(LsclError::shape(
                "maxpool2",
                format!("spatial size {h}x{w} not divisible by 2"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let mut argmax = vec![0usize; b * c * oh * ow];
        let src = &self.value(input).data;
        for p in 0..b * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = (2 * oy) * w + 2 * ox;
                    let mut best = plane[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                    let o = p * oh * ow + oy * ow + ox;
                    out.data[o] = best;
                    argmax[o] = p * h * w + best_idx;
                }
            }
        }
        self.push(Op::MaxPool2 { input, argmax }, out, "maxpool2")
    }

    /// Nearest-neighbor upsampling by a factor of 2.
    pub fn upsample2(&mut self, input: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = bchw(&self.value(input).shape, "upsample2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let src = &self.value(input).data;
        for p in 0..b * c {
            for y in 0..oh {
                for x in 0..ow {
                    out.data[p * oh * ow + y * ow + x] = src[p * h * w + (y / 2) * w + x / 2];
                }
            }
        }
        self.push(Op::Upsample2(input), out, "upsample2")
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ba, ca, ha, wa) = bchw(&self.value(a).shape, "concat")?;
        let (bb, cb, hb, wb) = bchw(&self.value(b).shape, "concat")?;
        if ba != bb || ha != hb || wa != wb {
            return Err(LsclError::shape(
                "concat",
                format!("{:?} vs {:?}", self.value(a).shape, self.value(b).shape),
            ));
        }
        let mut out = Tensor::zeros(&[ba, ca + cb, ha, wa]);
        let plane = ha * wa;
        for i in 0..ba {
            let dst = &mut out.data[i * (ca + cb) * plane..(i + 1) * (ca + cb) * plane];
            dst[..ca * plane]
                .copy_from_slice(&self.value(a).data[i * ca * plane..(i + 1) * ca * plane]);
            dst[ca * plane..]
                .copy_from_slice(&self.value(b).data[i * cb * plane..(i + 1) * cb * plane]);
        }
        self.push(Op::ConcatChannels(a, b), out, "concat")
    }

    /// Softmax over the channel axis, with max subtraction for stability.
    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = bchw(&self.value(input).shape, "softmax")?;
        let src = &self.value(input).data;
        let plane = h * w;
        let mut out = Tensor::zeros(&[b, c, h, w]);
        for i in 0..b {
            for px in 0..plane {
                let base = i * c * plane + px;
                let mut m = f64::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(src[base + ch * plane]);
                }
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (src[base + ch * plane] - m).exp();
                    out.data[base + ch * plane] = e;
                    z += e;
                }
                for ch in 0..c {
                    out.data[base + ch * plane] /= z;
                }
            }
        }
        self.push(Op::SoftmaxChannels(input), out, "softmax")
    }

    /// Gather the value at the labelled channel per pixel: [b,c,h,w] -> [b,h,w].
    pub fn one_hot_select(&mut self, input: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (b, c, h, w) = bchw(&self.value(input).shape, "one_hot_select")?;
        let plane = h * w;
        if labels.len() != b * plane {
            return Err(LsclError::shape(
                "one_hot_select",
                format!("labels length {} vs {b}x{h}x{w}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(LsclError::InvalidLabel {
                id: bad,
                num_classes: c,
            });
        }
        let src = &self.value(input).data;
        let mut out = Tensor::zeros(&[b, h, w]);
        for i in 0..b {
            for px in 0..plane {
                out.data[i * plane + px] = src[i * c * plane + labels[i * plane + px] * plane + px];
            }
        }
        self.push(
            Op::OneHotSelect {
                input,
                labels: labels.to_vec(),
            },
            out,
            "one_hot_select",
        )
    }

    /// Reverse accumulation from a scalar root. Returns one gradient slot per
    /// node; reachable nodes hold a gradient shaped like their forward value.
    pub fn backward(&self, root: NodeId) -> Result<Vec<Option<Tensor>>> {
        if !self.value(root).is_scalar() {
            return Err(LsclError::NonScalarRoot(self.value(root).shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::scalar(1.0));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut grads[id] {
            Some(g) => {
                for (gv, dv) in g.data.iter_mut().zip(&delta.data) {
                    *gv += dv;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, id: NodeId, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        match &self.nodes[id].op {
            Op::Input | Op::Constant => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = g.zip(self.value(*b), "mul-bwd", |gv, bv| gv * bv).unwrap();
                let db = g.zip(self.value(*a), "mul-bwd", |gv, av| gv * av).unwrap();
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::Div(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = g.zip(bv, "div-bwd", |gv, b| gv / b).unwrap();
                let mut db = Tensor::zeros(&bv.shape);
                for i in 0..db.len() {
                    db.data[i] = -g.data[i] * av.data[i] / (bv.data[i] * bv.data[i]);
                }
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::Scale(a, f) => {
                self.accum(grads, *a, g.map(|v| v * f));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(&av.shape);
                for i in 0..da.len() {
                    da.data[i] = if av.data[i] > 0.0 { g.data[i] } else { 0.0 };
                }
                self.accum(grads, *a, da);
            }
            Op::Log(a) => {
                let da = g.zip(self.value(*a), "log-bwd", |gv, av| gv / av).unwrap();
                self.accum(grads, *a, da);
            }
            Op::Sum(a) => {
                self.accum(grads, *a, Tensor::full(&self.value(*a).shape, g.item()));
            }
            Op::SumPlanes(a) => {
                let shape = &self.value(*a).shape;
                let plane = shape[2] * shape[3];
                let mut da = Tensor::zeros(shape);
                for (p, gv) in g.data.iter().enumerate() {
                    da.data[p * plane..(p + 1) * plane].fill(*gv);
                }
                self.accum(grads, *a, da);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.accum(grads, *a, Tensor::full(&self.value(*a).shape, g.item() / n));
            }
            Op::Clamp { input, lo, hi } => {
                let av = self.value(*input);
                let mut da = Tensor::zeros(&av.shape);
                for i in 0..da.len() {
                    da.data[i] = if av.data[i] >= *lo && av.data[i] <= *hi {
                        g.data[i]
                    } else {
                        0.0
                    };
                }
                self.accum(grads, *input, da);
            }
            Op::Conv2d { input, weight, bias } => {
                let (b, ci, h, w) = bchw(&self.value(*input).shape, "conv2d").unwrap();
                let co = self.value(*weight).shape[0];
                let mut dinput = Tensor::zeros(&self.value(*input).shape);
                let mut dweight = Tensor::zeros(&self.value(*weight).shape);
                let mut dbias = Tensor::zeros(&self.value(*bias).shape);
                conv2d_backward(
                    &self.value(*input).data,
                    &self.value(*weight).data,
                    &g.data,
                    &mut dinput.data,
                    &mut dweight.data,
                    &mut dbias.data,
                    b,
                    ci,
                    co,
                    h,
                    w,
                );
                self.accum(grads, *input, dinput);
                self.accum(grads, *weight, dweight);
                self.accum(grads, *bias, dbias);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut da = Tensor::zeros(&self.value(*input).shape);
                for (o, &src_idx) in argmax.iter().enumerate() {
                    da.data[src_idx] += g.data[o];
                }
                self.accum(grads, *input, da);
            }
            Op::Upsample2(a) => {
                let (b, c, h, w) = bchw(&self.value(*a).shape, "upsample2").unwrap();
                let (oh, ow) = (2 * h, 2 * w);
                let mut da = Tensor::zeros(&self.value(*a).shape);
                for p in 0..b * c {
                    for y in 0..oh {
                        for x in 0..ow {
                            da.data[p * h * w + (y / 2) * w + x / 2] +=
                                g.data[p * oh * ow + y * ow + x];
                        }
                    }
                }
                self.accum(grads, *a, da);
            }
            Op::ConcatChannels(a, b) => {
                let (ba, ca, ha, wa) = bchw(&self.value(*a).shape, "concat").unwrap();
                let cb = self.value(*b).shape[1];
                let plane = ha * wa;
                let mut da = Tensor::zeros(&self.value(*a).shape);
                let mut db = Tensor::zeros(&self.value(*b).shape);
                for i in 0..ba {
                    let gslice = &g.data[i * (ca + cb) * plane..(i + 1) * (ca + cb) * plane];
                    da.data[i * ca * plane..(i + 1) * ca * plane]
                        .copy_from_slice(&gslice[..ca * plane]);
                    db.data[i * cb * plane..(i + 1) * cb * plane]
                        .copy_from_slice(&gslice[ca * plane..]);
                }
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::SoftmaxChannels(a) => {
                let (b, c, h, w) = bchw(&self.value(*a).shape, "softmax").unwrap();
                let y = &self.nodes[id].value;
                let plane = h * w;
                let mut da = Tensor::zeros(&y.shape);
                for i in 0..b {
                    for px in 0..plane {
                        let base = i * c * plane + px;
                        let mut dot = 0.0;
                        for ch in 0..c {
                            dot += g.data[base + ch * plane] * y.data[base + ch * plane];
                        }
                        for ch in 0..c {
                            let idx = base + ch * plane;
                            da.data[idx] = y.data[idx] * (g.data[idx] - dot);
                        }
                    }
                }
                self.accum(grads, *a, da);
            }
            Op::OneHotSelect { input, labels } => {
                let (b, c, h, w) = bchw(&self.value(*input).shape, "one_hot_select").unwrap();
                let plane = h * w;
                let mut da = Tensor::zeros(&self.value(*input).shape);
                for i in 0..b {
                    for px in 0..plane {
                        da.data[i * c * plane + labels[i * plane + px] * plane + px] +=
                            g.data[i * plane + px];
                    }
                }
                self.accum(grads, *input, da);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
    b: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
) {
    let plane = h * w;
    for ib in 0..b {
        for oc in 0..co {
            let out_plane = &mut out[(ib * co + oc) * plane..(ib * co + oc + 1) * plane];
            out_plane.fill(bias[oc]);
            for ic in 0..ci {
                let in_plane = &input[(ib * ci + ic) * plane..(ib * ci + ic + 1) * plane];
                let k = &weight[(oc * ci + ic) * 9..(oc * ci + ic + 1) * 9];
                accum_corr3(in_plane, k, out_plane, h, w);
            }
        }
    }
}

/// out += correlation of `input` with the 3x3 kernel `k` (stride 1, zero
/// padding 1). One pass per kernel row keeps the inner loop a fused chain of
/// three stride-1 multiply-adds.
fn accum_corr3(input: &[f64], k: &[f64], out: &mut [f64], h: usize, w: usize) {
    // Accumulate each output row in a local buffer so the compiler can prove
    // the three tap streams never alias the destination.
    let mut small = [0.0f64; 256];
    let mut large;
    let acc: &mut [f64] = if w <= small.len() {
        &mut small[..w]
    } else {
        large = vec![0.0f64; w];
        &mut large[..]
    };
    for y in 0..h {
        let dst = &mut *acc;
        dst.fill(0.0);
        for ky in 0..3usize {
            let Some(iy) = (y + ky).checked_sub(1).filter(|&iy| iy < h) else {
                continue;
            };
            let irow = &input[iy * w..iy * w + w];
            let k0 = k[ky * 3];
            let k1 = k[ky * 3 + 1];
            let k2 = k[ky * 3 + 2];
            if w == 1 {
                dst[0] += k1 * irow[0];
                continue;
            }
            dst[0] += k1 * irow[0] + k2 * irow[1];
            let inner = &mut dst[1..w - 1];
            let left = &irow[..w - 2];
            let mid = &irow[1..w - 1];
            let right = &irow[2..];
            for i in 0..inner.len() {
                inner[i] += k0 * left[i] + k1 * mid[i] + k2 * right[i];
            }
            dst[w - 1] += k0 * irow[w - 2] + k1 * irow[w - 1];
        }
        let row = &mut out[y * w..(y + 1) * w];
        for (o, a) in row.iter_mut().zip(acc.iter()) {
            *o += a;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    input: &[f64],
    weight: &[f64],
    dout: &[f64],
    dinput: &mut [f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    b: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
) {
    let plane = h * w;
    for ib in 0..b {
        for oc in 0..co {
            let g_plane = &dout[(ib * co + oc) * plane..(ib * co + oc + 1) * plane];
            dbias[oc] += g_plane.iter().sum::<f64>();
            for ic in 0..ci {
                let in_plane = &input[(ib * ci + ic) * plane..(ib * ci + ic + 1) * plane];
                let din_plane = &mut dinput[(ib * ci + ic) * plane..(ib * ci + ic + 1) * plane];
                let k = &weight[(oc * ci + ic) * 9..(oc * ci + ic + 1) * 9];
                let dk = &mut dweight[(oc * ci + ic) * 9..(oc * ci + ic + 1) * 9];
                // d/d-input is the correlation of dout with the flipped
                // kernel, so it reuses the forward inner pass.
                let mut kf = [0.0; 9];
                for i in 0..9 {
                    kf[i] = k[8 - i];
                }
                accum_corr3(g_plane, &kf, din_plane, h, w);
                // d/d-weight: one shifted dot product of the planes per tap.
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let y_lo = 1usize.saturating_sub(ky);
                        let y_hi = (h + 1 - ky).min(h);
                        let x_lo = 1usize.saturating_sub(kx);
                        let x_hi = (w + 1 - kx).min(w);
                        // Four independent partial sums break the loop-carried
                        // dependency of a naive dot product.
                        let mut acc = [0.0f64; 4];
                        for y in y_lo..y_hi {
                            let iy = y + ky - 1;
                            let grow = &g_plane[y * w + x_lo..y * w + x_hi];
                            let irow = &in_plane[iy * w + x_lo + kx - 1..iy * w + x_hi + kx - 1];
                            let mut gc = grow.chunks_exact(4);
                            let mut ic = irow.chunks_exact(4);
                            for (g4, v4) in gc.by_ref().zip(ic.by_ref()) {
                                acc[0] += g4[0] * v4[0];
                                acc[1] += g4[1] * v4[1];
                                acc[2] += g4[2] * v4[2];
                                acc[3] += g4[3] * v4[3];
                            }
                            for (g, v) in gc.remainder().iter().zip(ic.remainder()) {
                                acc[0] += g * v;
                            }
                        }
                        dk[ky * 3 + kx] += (acc[0] + acc[1]) + (acc[2] + acc[3]);
                    }
                }
            }
        }
    }
}

/// Max relative error between an analytic gradient and central finite
/// differences of `f` at `x`. `coords` restricts the check to a coordinate
/// subset; `None` checks every coordinate.
pub fn finite_difference_check(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    analytic: &Tensor,
    h: f64,
    coords: Option<&[usize]>,
) -> Result<f64> {
    assert_eq!(x.shape, analytic.shape, "analytic gradient shape mismatch");
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut max_err = 0.0f64;
    for &i in coords {
        let mut xp = x.clone();
        xp.data[i] += h;
        let fp = f(&xp)?;
        let mut xm = x.clone();
        xm.data[i] -= h;
        let fm = f(&xm)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(LsclError::NonFinite("finite_difference_check".into()));
        }
        let central = (fp - fm) / (2.0 * h);
        let a = analytic.data[i];
        let err = (a - central).abs() / (1e-12f64).max(a.abs() + central.abs());
        max_err = max_err.max(err);
    }
    Ok(max_err)
}


#[cfg(test)]
mod perf_probe {
    use super::*;
    use crate::losses::combined_loss;
    use crate::metrics::LabelMap;
    use crate::tensor::Tensor;
    use crate::unet::{forward, init_unet, UNetConfig};
    use std::time::Instant;

    #[test]
    #[ignore]
    fn probe_forward_backward_cost() {
        let model = init_unet(UNetConfig::default(), 1).unwrap();
        let img = Tensor::full(&[1, 1, 64, 64], 0.5);
        let label = LabelMap { h: 64, w: 64, data: vec![1; 64 * 64] };
        let t0 = Instant::now();
        for _ in 0..20 {
            let mut tape = Tape::new();
            let x = tape.input(img.clone()).unwrap();
            let nodes = forward(&model, x, &mut tape).unwrap();
            std::hint::black_box(tape.value(nodes.logits));
        }
        let fwd = t0.elapsed();
        let t1 = Instant::now();
        for _ in 0..20 {
            let mut tape = Tape::new();
            let x = tape.input(img.clone()).unwrap();
            let nodes = forward(&model, x, &mut tape).unwrap();
            let loss = combined_loss(nodes.logits, std::slice::from_ref(&label), &mut tape).unwrap();
            std::hint::black_box(tape.backward(loss).unwrap());
        }
        let full = t1.elapsed();
        eprintln!("forward only: {:?}/iter, forward+loss+backward: {:?}/iter",
            fwd / 20, full / 20);
    }


    #[test]
    #[ignore]
    fn probe_conv_backward_only() {
        use crate::tensor::Rng;
        let mut rng = Rng::new(3);
        // (ci, co, h, w) for every conv in the default net, batch 1.
        let shapes = [
            (1usize, 8usize, 64usize, 64usize), (8, 8, 64, 64),
            (8, 16, 32, 32), (16, 16, 32, 32),
            (16, 32, 16, 16), (32, 32, 16, 16),
            (48, 16, 32, 32), (16, 16, 32, 32),
            (24, 8, 64, 64), (8, 8, 64, 64),
            (8, 4, 64, 64),
        ];
        let cases: Vec<_> = shapes.iter().map(|&(ci, co, h, w)| {
            let input: Vec<f64> = (0..ci * h * w).map(|_| rng.gauss()).collect();
            let weight: Vec<f64> = (0..co * ci * 9).map(|_| rng.gauss()).collect();
            let dout: Vec<f64> = (0..co * h * w).map(|_| rng.gauss()).collect();
            (input, weight, dout, ci, co, h, w)
        }).collect();
        let t0 = std::time::Instant::now();
        for _ in 0..20 {
            for (input, weight, dout, ci, co, h, w) in &cases {
                let mut di = vec![0.0; input.len()];
                let mut dw = vec![0.0; weight.len()];
                let mut db = vec![0.0; *co];
                conv2d_backward(input, weight, dout, &mut di, &mut dw, &mut db, 1, *ci, *co, *h, *w);
                std::hint::black_box(&di);
            }
        }
        eprintln!("all conv backward: {:?}/iter", t0.elapsed() / 20);
        let t1 = std::time::Instant::now();
        for _ in 0..20 {
            for (input, weight, _dout, ci, co, h, w) in &cases {
                let bias = vec![0.0; *co];
                let mut out = vec![0.0; co * h * w];
                conv2d_forward(input, weight, &bias, &mut out, 1, *ci, *co, *h, *w);
                std::hint::black_box(&out);
            }
        }
        eprintln!("all conv forward: {:?}/iter", t1.elapsed() / 20);
    }

    #[test]
    #[ignore]
    fn probe_phase_breakdown() {
        let model = init_unet(UNetConfig::default(), 1).unwrap();
        let img = Tensor::full(&[1, 1, 64, 64], 0.5);
        let label = LabelMap { h: 64, w: 64, data: vec![1; 64 * 64] };
        let t0 = Instant::now();
        for _ in 0..20 {
            let mut tape = Tape::new();
            let x = tape.input(img.clone()).unwrap();
            let nodes = forward(&model, x, &mut tape).unwrap();
            let loss = combined_loss(nodes.logits, std::slice::from_ref(&label), &mut tape).unwrap();
            std::hint::black_box(tape.value(loss));
        }
        let fl = t0.elapsed();
        eprintln!("forward+loss only: {:?}/iter", fl / 20);
    }
}
