//! Reverse-mode autodiff on an operation tape.
//!
//! Every forward op appends a node holding its output value plus whatever it
//! needs for the backward pass (argmax indices, softmax probabilities, ...).
//! `backward` walks the tape once in reverse, accumulating gradients in a
//! fixed order so repeated runs are bit-identical. A tape is single-use:
//! calling `backward` twice, or recording new ops afterwards, is an error.

use crate::error::{FdseError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { a: ValueId, c: F },
    Abs { a: ValueId },
    Sum { a: ValueId },
    Reshape { a: ValueId },
    Relu { a: ValueId },
    MatMul { a: ValueId, b: ValueId },
    Linear { x: ValueId, w: ValueId, b: ValueId },
    Conv2d {
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        stride: usize,
        padding: usize,
        groups: usize,
        // im2col buffer from the forward pass, laid out [groups][Cg*kh*kw][B*OH*OW].
        cols: Vec<F>,
    },
    GatherChannels { x: ValueId, index: Vec<usize> },
    ConcatChannels { a: ValueId, b: ValueId },
    MaxPool2d { a: ValueId, argmax: Vec<usize> },
    AdaptiveAvgPool2d { a: ValueId },
    ChannelMean { a: ValueId },
    ChannelVar { a: ValueId, mean: Vec<F> },
    BatchNormApply { x: ValueId, mean: ValueId, var: ValueId, gamma: ValueId, beta: ValueId, inv_std: Vec<F> },
    SoftmaxCrossEntropy { logits: ValueId, labels: Vec<usize>, probs: Vec<F> },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    needs_grad: bool,
    op: Op<F>,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    consumed: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    pub fn value(&self, id: ValueId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` target w.r.t. this node, if any flowed.
    pub fn grad(&self, id: ValueId) -> Option<&[F]> {
        self.grads[id.0].as_deref()
    }

    pub fn grad_tensor(&self, id: ValueId) -> Option<Tensor<F>> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[id.0].value.shape().to_vec(), g.clone()).unwrap())
    }

    fn push(&mut self, value: Tensor<F>, needs_grad: bool, op: Op<F>) -> ValueId {
        self.nodes.push(Node { value, needs_grad, op });
        self.grads.push(None);
        ValueId(self.nodes.len() - 1)
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            return Err(FdseError::StaleTape);
        }
        Ok(())
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Trainable input. Gradients accumulate here during `backward`.
    pub fn leaf(&mut self, value: Tensor<F>) -> ValueId {
        self.push(value, true, Op::Leaf)
    }

    /// Non-trainable input: no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor<F>) -> ValueId {
        self.push(value, false, Op::Leaf)
    }

    fn binary_same_shape(&self, a: ValueId, b: ValueId, what: &str) -> Result<()> {
        self.check_live()?;
        if self.shape(a) != self.shape(b) {
            return Err(FdseError::Dimension(format!(
                "{}: shapes {:?} and {:?} differ",
                what,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape(a, b, "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: ValueId, c: F) -> Result<ValueId> {
        self.check_live()?;
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a);
        Ok(self.push(value, needs, Op::Scale { a, c }))
    }

    pub fn abs(&mut self, a: ValueId) -> Result<ValueId> {
        self.check_live()?;
        let data = self.value(a).data().iter().map(|&x| x.abs()).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a);
        Ok(self.push(value, needs, Op::Abs { a }))
    }

    pub fn sum(&mut self, a: ValueId) -> Result<ValueId> {
        self.check_live()?;
        let mut acc = F::zero();
        for &x in self.value(a).data() {
            acc = acc + x;
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::scalar(acc), needs, Op::Sum { a }))
    }

    pub fn reshape(&mut self, a: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        self.check_live()?;
        let value = self.value(a).clone().reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(value, needs, Op::Reshape { a }))
    }

    pub fn relu(&mut self, a: ValueId) -> Result<ValueId> {
        self.check_live()?;
        let data = self.value(a).data().iter().map(|&x| if x > F::zero() { x } else { F::zero() }).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a);
        Ok(self.push(value, needs, Op::Relu { a }))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_live()?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(FdseError::Dimension(format!("matmul: {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let arow = &da[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &db[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::MatMul { a, b }))
    }

    /// x [B,din] * w [dout,din]^T + b [dout] -> [B,dout]
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_live()?;
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 || sx[1] != sw[1] || sw[0] != sb[0] {
            return Err(FdseError::Dimension(format!("linear: x {:?}, w {:?}, b {:?}", sx, sw, sb)));
        }
        let (batch, din, dout) = (sx[0], sx[1], sw[0]);
        let (dx, dw, dbias) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![F::zero(); batch * dout];
        for bi in 0..batch {
            let xrow = &dx[bi * din..(bi + 1) * din];
            for o in 0..dout {
                let wrow = &dw[o * din..(o + 1) * din];
                let mut acc = dbias[o];
                for (xv, wv) in xrow.iter().zip(wrow) {
                    acc = acc + *xv * *wv;
                }
                out[bi * dout + o] = acc;
            }
        }
        let value = Tensor::new(vec![batch, dout], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, needs, Op::Linear { x, w, b }))
    }

    /// Grouped 2D convolution without bias broadcasting tricks.
    /// x [B,Cin,H,W], w [Cout,Cin/groups,kh,kw], optional bias [Cout].
    /// Each output element starts at the bias and accumulates over
    /// (channel, kernel row, kernel col) in that order, matching a naive
    /// quadruple-loop reference bit for bit.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<ValueId> {
        self.check_live()?;
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(FdseError::Dimension(format!("conv2d: x {:?}, w {:?}", sx, sw)));
        }
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, cg, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cg != cin / groups {
            return Err(FdseError::Dimension(format!(
                "conv2d: groups {} incompatible with Cin {} / Cout {} / w {:?}",
                groups, cin, cout, sw
            )));
        }
        if stride == 0 {
            return Err(FdseError::Dimension("conv2d: stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(FdseError::Dimension(format!(
                "conv2d: kernel {}x{} larger than padded input {}x{}",
                kh,
                kw,
                h + 2 * padding,
                wd + 2 * padding
            )));
        }
        if let Some(bid) = b {
            let sb = self.shape(bid);
            if sb != [cout] {
                return Err(FdseError::Dimension(format!("conv2d: bias {:?}, expected [{}]", sb, cout)));
            }
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let og = cout / groups;
        let kk = cg * kh * kw;
        let n = batch * oh * ow;

        let dx = self.value(x).data();
        let dw = self.value(w).data();
        let dbias: Option<&[F]> = b.map(|bid| self.nodes[bid.0].value.data());
        let mut out = vec![F::zero(); batch * cout * oh * ow];

        // im2col + small GEMM. Each output element still accumulates its
        // products in (channel, kernel row, kernel col) order starting from
        // the bias, so results match the naive quadruple loop; padding only
        // contributes exact zeros.
        let mut cols = vec![F::zero(); groups * kk * n];
        for g in 0..groups {
            let gcols = &mut cols[g * kk * n..(g + 1) * kk * n];
            fill_cols(gcols, dx, g * cg, cg, batch, cin, h, wd, kh, kw, stride, padding, oh, ow);
            for ol in 0..og {
                let o = g * og + ol;
                let wrow = &dw[o * kk..(o + 1) * kk];
                let mut acc = vec![if let Some(bias) = dbias { bias[o] } else { F::zero() }; n];
                for (k, &wv) in wrow.iter().enumerate() {
                    let crow = &gcols[k * n..(k + 1) * n];
                    for (a, &cv) in acc.iter_mut().zip(crow) {
                        *a = *a + wv * cv;
                    }
                }
                for bi in 0..batch {
                    out[(bi * cout + o) * oh * ow..(bi * cout + o + 1) * oh * ow]
                        .copy_from_slice(&acc[bi * oh * ow..(bi + 1) * oh * ow]);
                }
            }
        }
        let value = Tensor::new(vec![batch, cout, oh, ow], out)?;
        let needs = self.needs(x) || self.needs(w) || b.map(|bid| self.needs(bid)).unwrap_or(false);
        if !needs {
            cols = Vec::new();
        }
        Ok(self.push(value, needs, Op::Conv2d { x, w, b, stride, padding, groups, cols }))
    }

    /// Select channels of x [B,C,..] by index; duplicates allowed.
    pub fn gather_channels(&mut self, x: ValueId, index: Vec<usize>) -> Result<ValueId> {
        self.check_live()?;
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(FdseError::Dimension(format!("gather_channels: x {:?}", sx)));
        }
        let (batch, c) = (sx[0], sx[1]);
        let inner: usize = sx[2..].iter().product();
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(FdseError::Dimension(format!(
                "gather_channels: index {} out of {} channels",
                bad, c
            )));
        }
        let dx = self.value(x).data();
        let mut out = Vec::with_capacity(batch * index.len() * inner);
        for bi in 0..batch {
            for &ci in &index {
                let start = (bi * c + ci) * inner;
                out.extend_from_slice(&dx[start..start + inner]);
            }
        }
        let mut shape = sx.clone();
        shape[1] = index.len();
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::GatherChannels { x, index }))
    }

    /// Concatenate along the channel axis: [B,C1,..] ++ [B,C2,..] -> [B,C1+C2,..].
    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_live()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(FdseError::Dimension(format!("concat_channels: {:?} ++ {:?}", sa, sb)));
        }
        let batch = sa[0];
        let inner: usize = sa[2..].iter().product();
        let (c1, c2) = (sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(batch * (c1 + c2) * inner);
        for bi in 0..batch {
            out.extend_from_slice(&da[bi * c1 * inner..(bi + 1) * c1 * inner]);
            out.extend_from_slice(&db[bi * c2 * inner..(bi + 1) * c2 * inner]);
        }
        let mut shape = sa.clone();
        shape[1] = c1 + c2;
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::ConcatChannels { a, b }))
    }

    /// Max pooling with window k and stride s, no padding. Ties take the
    /// first element in row-major window order.
    pub fn maxpool2d(&mut self, a: ValueId, k: usize, stride: usize) -> Result<ValueId> {
        self.check_live()?;
        let sa = self.shape(a).to_vec();
        if sa.len() != 4 || k == 0 || stride == 0 {
            return Err(FdseError::Dimension(format!("maxpool2d: x {:?}, k {}, stride {}", sa, k, stride)));
        }
        let (batch, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        if h < k || w < k {
            return Err(FdseError::Dimension(format!(
                "maxpool2d: window {} larger than input {}x{}",
                k, h, w
            )));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let da = self.value(a).data();
        let mut out = Vec::with_capacity(batch * c * oh * ow);
        let mut argmax = Vec::with_capacity(batch * c * oh * ow);
        for bc in 0..batch * c {
            let plane = &da[bc * h * w..(bc + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    let (y0, x0) = (y * stride, x * stride);
                    let mut best = plane[y0 * w + x0];
                    let mut best_idx = y0 * w + x0;
                    for r in 0..k {
                        for t in 0..k {
                            let idx = (y0 + r) * w + (x0 + t);
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(bc * h * w + best_idx);
                }
            }
        }
        let value = Tensor::new(vec![batch, c, oh, ow], out)?;
        let needs = self.needs(a);
        Ok(self.push(value, needs, Op::MaxPool2d { a, argmax }))
    }

    /// Average pooling to a fixed output grid; region for output cell i is
    /// [floor(i*H/oh), ceil((i+1)*H/oh)).
    pub fn adaptive_avgpool2d(&mut self, a: ValueId, oh: usize, ow: usize) -> Result<ValueId> {
        self.check_live()?;
        let sa = self.shape(a).to_vec();
        if sa.len() != 4 || oh == 0 || ow == 0 || sa[2] < oh || sa[3] < ow {
            return Err(FdseError::Dimension(format!(
                "adaptive_avgpool2d: x {:?} to {}x{}",
                sa, oh, ow
            )));
        }
        let (batch, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let da = self.value(a).data();
        let mut out = Vec::with_capacity(batch * c * oh * ow);
        for bc in 0..batch * c {
            let plane = &da[bc * h * w..(bc + 1) * h * w];
            for i in 0..oh {
                let (y0, y1) = pool_region(i, h, oh);
                for j in 0..ow {
                    let (x0, x1) = pool_region(j, w, ow);
                    let mut acc = F::zero();
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc = acc + plane[y * w + x];
                        }
                    }
                    let count = F::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                    out.push(acc / count);
                }
            }
        }
        let value = Tensor::new(vec![batch, c, oh, ow], out)?;
        let needs = self.needs(a);
        Ok(self.push(value, needs, Op::AdaptiveAvgPool2d { a }))
    }

    /// Per-channel mean over batch and spatial dims: [B,C,..] -> [C].
    pub fn channel_mean(&mut self, a: ValueId) -> Result<ValueId> {
        self.check_live()?;
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(FdseError::Dimension(format!("channel_mean: x {:?}", sa)));
        }
        let (batch, c) = (sa[0], sa[1]);
        let inner: usize = sa[2..].iter().product();
        if c == 0 || batch * inner == 0 {
            return Err(FdseError::EmptyLayer);
        }
        let da = self.value(a).data();
        let m = F::from_f64((batch * inner) as f64);
        let mut acc = vec![F::zero(); c];
        for bi in 0..batch {
            for ci in 0..c {
                let start = (bi * c + ci) * inner;
                for &v in &da[start..start + inner] {
                    acc[ci] = acc[ci] + v;
                }
            }
        }
        for v in &mut acc {
            *v = *v / m;
        }
        let value = Tensor::new(vec![c], acc)?;
        let needs = self.needs(a);
        Ok(self.push(value, needs, Op::ChannelMean { a }))
    }

    /// Per-channel biased variance (divide by count): [B,C,..] -> [C].
    pub fn channel_var(&mut self, a: ValueId) -> Result<ValueId> {
        self.check_live()?;
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(FdseError::Dimension(format!("channel_var: x {:?}", sa)));
        }
        let (batch, c) = (sa[0], sa[1]);
        let inner: usize = sa[2..].iter().product();
        if c == 0 || batch * inner == 0 {
            return Err(FdseError::EmptyLayer);
        }
        let da = self.value(a).data();
        let m = F::from_f64((batch * inner) as f64);
        let mut mean = vec![F::zero(); c];
        for bi in 0..batch {
            for ci in 0..c {
                let start = (bi * c + ci) * inner;
                for &v in &da[start..start + inner] {
                    mean[ci] = mean[ci] + v;
                }
            }
        }
        for v in &mut mean {
            *v = *v / m;
        }
        let mut var = vec![F::zero(); c];
        for bi in 0..batch {
            for ci in 0..c {
                let start = (bi * c + ci) * inner;
                for &v in &da[start..start + inner] {
                    let d = v - mean[ci];
                    var[ci] = var[ci] + d * d;
                }
            }
        }
        for v in &mut var {
            *v = *v / m;
        }
        let value = Tensor::new(vec![c], var)?;
        let needs = self.needs(a);
        Ok(self.push(value, needs, Op::ChannelVar { a, mean }))
    }

    /// Normalize x per channel with explicit mean/var vectors, then apply the
    /// affine pair: out = gamma * (x - mean) / sqrt(var + eps) + beta.
    /// Differentiable through all five inputs, which is what lets the batch
    /// statistics feed both the normalization and the consistency loss.
    pub fn batchnorm_apply(
        &mut self,
        x: ValueId,
        mean: ValueId,
        var: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: F,
    ) -> Result<ValueId> {
        self.check_live()?;
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(FdseError::Dimension(format!("batchnorm_apply: x {:?}", sx)));
        }
        let c = sx[1];
        for (name, id) in [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)] {
            if self.shape(id) != [c] {
                return Err(FdseError::Dimension(format!(
                    "batchnorm_apply: {} {:?}, expected [{}]",
                    name,
                    self.shape(id),
                    c
                )));
            }
        }
        let (batch, inner) = (sx[0], sx[2..].iter().product::<usize>());
        let inv_std: Vec<F> =
            self.value(var).data().iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let dx = self.value(x).data();
        let dm = self.value(mean).data();
        let dg = self.value(gamma).data();
        let db = self.value(beta).data();
        let mut out = Vec::with_capacity(dx.len());
        for bi in 0..batch {
            for ci in 0..c {
                let start = (bi * c + ci) * inner;
                let (g, bv, m, inv) = (dg[ci], db[ci], dm[ci], inv_std[ci]);
                for &v in &dx[start..start + inner] {
                    out.push(g * (v - m) * inv + bv);
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        let needs = self.needs(x)
            || self.needs(mean)
            || self.needs(var)
            || self.needs(gamma)
            || self.needs(beta);
        Ok(self.push(value, needs, Op::BatchNormApply { x, mean, var, gamma, beta, inv_std }))
    }

    /// Mean cross-entropy over the batch with an internal softmax.
    /// logits [B,C], labels length B with every label < C. Output is scalar.
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, labels: &[u32]) -> Result<ValueId> {
        self.check_live()?;
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(FdseError::Dimension(format!(
                "softmax_cross_entropy: logits {:?}, {} labels",
                sl,
                labels.len()
            )));
        }
        let (batch, c) = (sl[0], sl[1]);
        if batch == 0 {
            return Err(FdseError::EmptyData("cross entropy needs at least one row".into()));
        }
        let mut lab = Vec::with_capacity(batch);
        for &l in labels {
            let l = l as usize;
            if l >= c {
                return Err(FdseError::Label { label: l, num_classes: c });
            }
            lab.push(l);
        }
        let dl = self.value(logits).data();
        let mut probs = vec![F::zero(); batch * c];
        let mut loss = F::zero();
        for bi in 0..batch {
            let row = &dl[bi * c..(bi + 1) * c];
            let mx = row.iter().fold(row[0], |a, &b| if b > a { b } else { a });
            let mut z = F::zero();
            for &v in row {
                z = z + (v - mx).exp();
            }
            let log_z = z.ln();
            for (j, &v) in row.iter().enumerate() {
                probs[bi * c + j] = (v - mx - log_z).exp();
            }
            loss = loss - (row[lab[bi]] - mx - log_z);
        }
        loss = loss / F::from_f64(batch as f64);
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), needs, Op::SoftmaxCrossEntropy { logits, labels: lab, probs }))
    }

    /// Reverse pass from a scalar node. Consumes the tape: further ops or a
    /// second backward call fail with a stale-tape error.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        self.check_live()?;
        if self.value(loss).numel() != 1 {
            return Err(FdseError::Dimension(format!(
                "backward target must be scalar, got {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![F::one()]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else { continue };
            backprop_node(&self.nodes, &mut self.grads, i, &gy);
            self.grads[i] = Some(gy);
        }
        Ok(())
    }
}

fn ensure_grad<'a, F: Real>(
    grads: &'a mut [Option<Vec<F>>],
    nodes: &[Node<F>],
    id: ValueId,
) -> &'a mut [F] {
    let numel = nodes[id.0].value.numel();
    grads[id.0].get_or_insert_with(|| vec![F::zero(); numel])
}

fn backprop_node<F: Real>(nodes: &[Node<F>], grads: &mut [Option<Vec<F>>], i: usize, gy: &[F]) {
    let needs = |id: ValueId| nodes[id.0].needs_grad;
    let val = |id: ValueId| nodes[id.0].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            if needs(*a) {
                for (g, &v) in ensure_grad(grads, nodes, *a).iter_mut().zip(gy) {
                    *g = *g + v;
                }
            }
            if needs(*b) {
                for (g, &v) in ensure_grad(grads, nodes, *b).iter_mut().zip(gy) {
                    *g = *g + v;
                }
            }
        }
        Op::Sub { a, b } => {
            if needs(*a) {
                for (g, &v) in ensure_grad(grads, nodes, *a).iter_mut().zip(gy) {
                    *g = *g + v;
                }
            }
            if needs(*b) {
                for (g, &v) in ensure_grad(grads, nodes, *b).iter_mut().zip(gy) {
                    *g = *g - v;
                }
            }
        }
        Op::Mul { a, b } => {
            if needs(*a) {
                let vb = val(*b);
                for ((g, &v), &bv) in ensure_grad(grads, nodes, *a).iter_mut().zip(gy).zip(vb) {
                    *g = *g + v * bv;
                }
            }
            if needs(*b) {
                let va = val(*a);
                for ((g, &v), &av) in ensure_grad(grads, nodes, *b).iter_mut().zip(gy).zip(va) {
                    *g = *g + v * av;
                }
            }
        }
        Op::Scale { a, c } => {
            if needs(*a) {
                for (g, &v) in ensure_grad(grads, nodes, *a).iter_mut().zip(gy) {
                    *g = *g + v * *c;
                }
            }
        }
        Op::Abs { a } => {
            if needs(*a) {
                let va = val(*a);
                for ((g, &v), &x) in ensure_grad(grads, nodes, *a).iter_mut().zip(gy).zip(va) {
                    if x > F::zero() {
                        *g = *g + v;
                    } else if x < F::zero() {
                        *g = *g - v;
                    }
                }
            }
        }
        Op::Sum { a } => {
            if needs(*a) {
                let v = gy[0];
                for g in ensure_grad(grads, nodes, *a).iter_mut() {
                    *g = *g + v;
                }
            }
        }
        Op::Reshape { a } => {
            if needs(*a) {
                for (g, &v) in ensure_grad(grads, nodes, *a).iter_mut().zip(gy) {
                    *g = *g + v;
                }
            }
        }
        Op::Relu { a } => {
            if needs(*a) {
                let va = val(*a);
                for ((g, &v), &x) in ensure_grad(grads, nodes, *a).iter_mut().zip(gy).zip(va) {
                    if x > F::zero() {
                        *g = *g + v;
                    }
                }
            }
        }
        Op::MatMul { a, b } => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[1];
            if needs(*a) {
                let db = val(*b);
                let ga = ensure_grad(grads, nodes, *a);
                for i2 in 0..m {
                    let grow = &gy[i2 * n..(i2 + 1) * n];
                    for kk in 0..k {
                        let brow = &db[kk * n..(kk + 1) * n];
                        let mut acc = F::zero();
                        for (gv, bv) in grow.iter().zip(brow) {
                            acc = acc + *gv * *bv;
                        }
                        ga[i2 * k + kk] = ga[i2 * k + kk] + acc;
                    }
                }
            }
            if needs(*b) {
                let da = val(*a);
                let gb = ensure_grad(grads, nodes, *b);
                for i2 in 0..m {
                    let grow = &gy[i2 * n..(i2 + 1) * n];
                    for kk in 0..k {
                        let av = da[i2 * k + kk];
                        let gbrow = &mut gb[kk * n..(kk + 1) * n];
                        for (gv, gr) in gbrow.iter_mut().zip(grow) {
                            *gv = *gv + av * *gr;
                        }
                    }
                }
            }
        }
        Op::Linear { x, w, b } => {
            let (batch, din) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
            let dout = nodes[w.0].value.shape()[0];
            if needs(*x) {
                let dw = val(*w);
                let gx = ensure_grad(grads, nodes, *x);
                for bi in 0..batch {
                    let gxrow = &mut gx[bi * din..(bi + 1) * din];
                    for o in 0..dout {
                        let gv = gy[bi * dout + o];
                        let wrow = &dw[o * din..(o + 1) * din];
                        for (g, wv) in gxrow.iter_mut().zip(wrow) {
                            *g = *g + gv * *wv;
                        }
                    }
                }
            }
            if needs(*w) {
                let dx = val(*x);
                let gw = ensure_grad(grads, nodes, *w);
                for bi in 0..batch {
                    let xrow = &dx[bi * din..(bi + 1) * din];
                    for o in 0..dout {
                        let gv = gy[bi * dout + o];
                        let gwrow = &mut gw[o * din..(o + 1) * din];
                        for (g, xv) in gwrow.iter_mut().zip(xrow) {
                            *g = *g + gv * *xv;
                        }
                    }
                }
            }
            if needs(*b) {
                let gb = ensure_grad(grads, nodes, *b);
                for bi in 0..batch {
                    for o in 0..dout {
                        gb[o] = gb[o] + gy[bi * dout + o];
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, stride, padding, groups, cols } => {
            conv2d_backward(nodes, grads, *x, *w, *b, *stride, *padding, *groups, cols, i, gy);
        }
        Op::GatherChannels { x, index } => {
            if needs(*x) {
                let sx = nodes[x.0].value.shape();
                let (batch, c) = (sx[0], sx[1]);
                let inner: usize = sx[2..].iter().product();
                let gx = ensure_grad(grads, nodes, *x);
                for bi in 0..batch {
                    for (oi, &ci) in index.iter().enumerate() {
                        let src = (bi * index.len() + oi) * inner;
                        let dst = (bi * c + ci) * inner;
                        for j in 0..inner {
                            gx[dst + j] = gx[dst + j] + gy[src + j];
                        }
                    }
                }
            }
        }
        Op::ConcatChannels { a, b } => {
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let batch = sa[0];
            let inner: usize = sa[2..].iter().product();
            let (c1, c2) = (sa[1], sb[1]);
            let row = (c1 + c2) * inner;
            if needs(*a) {
                let ga = ensure_grad(grads, nodes, *a);
                for bi in 0..batch {
                    let src = bi * row;
                    let dst = bi * c1 * inner;
                    for j in 0..c1 * inner {
                        ga[dst + j] = ga[dst + j] + gy[src + j];
                    }
                }
            }
            if needs(*b) {
                let gb = ensure_grad(grads, nodes, *b);
                for bi in 0..batch {
                    let src = bi * row + c1 * inner;
                    let dst = bi * c2 * inner;
                    for j in 0..c2 * inner {
                        gb[dst + j] = gb[dst + j] + gy[src + j];
                    }
                }
            }
        }
        Op::MaxPool2d { a, argmax } => {
            if needs(*a) {
                let ga = ensure_grad(grads, nodes, *a);
                for (oi, &src) in argmax.iter().enumerate() {
                    ga[src] = ga[src] + gy[oi];
                }
            }
        }
        Op::AdaptiveAvgPool2d { a } => {
            if needs(*a) {
                let sa = nodes[a.0].value.shape();
                let (batch, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
                let so = nodes[i].value.shape();
                let (oh, ow) = (so[2], so[3]);
                let ga = ensure_grad(grads, nodes, *a);
                for bc in 0..batch * c {
                    for oi in 0..oh {
                        let (y0, y1) = pool_region(oi, h, oh);
                        for oj in 0..ow {
                            let (x0, x1) = pool_region(oj, w, ow);
                            let count = F::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                            let g = gy[(bc * oh + oi) * ow + oj] / count;
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    let idx = bc * h * w + y * w + x;
                                    ga[idx] = ga[idx] + g;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::ChannelMean { a } => {
            if needs(*a) {
                let sa = nodes[a.0].value.shape();
                let (batch, c) = (sa[0], sa[1]);
                let inner: usize = sa[2..].iter().product();
                let m = F::from_f64((batch * inner) as f64);
                let ga = ensure_grad(grads, nodes, *a);
                for bi in 0..batch {
                    for ci in 0..c {
                        let g = gy[ci] / m;
                        let start = (bi * c + ci) * inner;
                        for v in &mut ga[start..start + inner] {
                            *v = *v + g;
                        }
                    }
                }
            }
        }
        Op::ChannelVar { a, mean } => {
            if needs(*a) {
                let sa = nodes[a.0].value.shape();
                let (batch, c) = (sa[0], sa[1]);
                let inner: usize = sa[2..].iter().product();
                let m = F::from_f64((batch * inner) as f64);
                let two = F::from_f64(2.0);
                let da = val(*a);
                let ga = ensure_grad(grads, nodes, *a);
                for bi in 0..batch {
                    for ci in 0..c {
                        let coeff = gy[ci] * two / m;
                        let start = (bi * c + ci) * inner;
                        for j in start..start + inner {
                            ga[j] = ga[j] + coeff * (da[j] - mean[ci]);
                        }
                    }
                }
            }
        }
        Op::BatchNormApply { x, mean, var, gamma, beta, inv_std } => {
            let sx = nodes[x.0].value.shape();
            let (batch, c) = (sx[0], sx[1]);
            let inner: usize = sx[2..].iter().product();
            let dx = val(*x);
            let dm = val(*mean);
            let dg = val(*gamma);
            let half = F::from_f64(0.5);
            if needs(*x) {
                let gx = ensure_grad(grads, nodes, *x);
                for bi in 0..batch {
                    for ci in 0..c {
                        let coeff = dg[ci] * inv_std[ci];
                        let start = (bi * c + ci) * inner;
                        for j in start..start + inner {
                            gx[j] = gx[j] + gy[j] * coeff;
                        }
                    }
                }
            }
            if needs(*mean) {
                let gm = ensure_grad(grads, nodes, *mean);
                for bi in 0..batch {
                    for ci in 0..c {
                        let coeff = dg[ci] * inv_std[ci];
                        let start = (bi * c + ci) * inner;
                        let mut acc = F::zero();
                        for &v in &gy[start..start + inner] {
                            acc = acc + v;
                        }
                        gm[ci] = gm[ci] - coeff * acc;
                    }
                }
            }
            if needs(*var) {
                let gv = ensure_grad(grads, nodes, *var);
                for bi in 0..batch {
                    for ci in 0..c {
                        let coeff = dg[ci] * inv_std[ci] * inv_std[ci] * inv_std[ci] * half;
                        let start = (bi * c + ci) * inner;
                        let mut acc = F::zero();
                        for j in start..start + inner {
                            acc = acc + gy[j] * (dx[j] - dm[ci]);
                        }
                        gv[ci] = gv[ci] - coeff * acc;
                    }
                }
            }
            if needs(*gamma) {
                let gg = ensure_grad(grads, nodes, *gamma);
                for bi in 0..batch {
                    for ci in 0..c {
                        let start = (bi * c + ci) * inner;
                        let mut acc = F::zero();
                        for j in start..start + inner {
                            acc = acc + gy[j] * (dx[j] - dm[ci]) * inv_std[ci];
                        }
                        gg[ci] = gg[ci] + acc;
                    }
                }
            }
            if needs(*beta) {
                let gb = ensure_grad(grads, nodes, *beta);
                for bi in 0..batch {
                    for ci in 0..c {
                        let start = (bi * c + ci) * inner;
                        let mut acc = F::zero();
                        for &v in &gy[start..start + inner] {
                            acc = acc + v;
                        }
                        gb[ci] = gb[ci] + acc;
                    }
                }
            }
        }
        Op::SoftmaxCrossEntropy { logits, labels, probs } => {
            if needs(*logits) {
                let c = nodes[logits.0].value.shape()[1];
                let batch = labels.len();
                let inv_b = F::one() / F::from_f64(batch as f64);
                let g0 = gy[0];
                let gl = ensure_grad(grads, nodes, *logits);
                for bi in 0..batch {
                    for j in 0..c {
                        let mut v = probs[bi * c + j];
                        if j == labels[bi] {
                            v = v - F::one();
                        }
                        gl[bi * c + j] = gl[bi * c + j] + g0 * v * inv_b;
                    }
                }
            }
        }
    }
}

/// Copy one group's receptive fields into a [Cg*kh*kw][B*OH*OW] matrix.
/// Out-of-bounds (padding) positions stay zero.
#[allow(clippy::too_many_arguments)]
fn fill_cols<F: Real>(
    cols: &mut [F],
    x: &[F],
    c0: usize,
    cg: usize,
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) {
    let n = batch * oh * ow;
    for cl in 0..cg {
        let c = c0 + cl;
        for r in 0..kh {
            let (ylo, yhi) = conv_range(r, padding, stride, h, oh);
            for t in 0..kw {
                let (xlo, xhi) = conv_range(t, padding, stride, w, ow);
                let k = (cl * kh + r) * kw + t;
                let crow = &mut cols[k * n..(k + 1) * n];
                if ylo > yhi || xlo > xhi {
                    continue;
                }
                for bi in 0..batch {
                    let xc = &x[(bi * cin + c) * h * w..(bi * cin + c + 1) * h * w];
                    let cb = &mut crow[bi * oh * ow..(bi + 1) * oh * ow];
                    for y in ylo..=yhi {
                        let iy = y * stride + r - padding;
                        let xrow = &xc[iy * w..(iy + 1) * w];
                        let crow_y = &mut cb[y * ow..(y + 1) * ow];
                        for xx in xlo..=xhi {
                            crow_y[xx] = xrow[xx * stride + t - padding];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<F: Real>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    x: ValueId,
    w: ValueId,
    b: Option<ValueId>,
    stride: usize,
    padding: usize,
    groups: usize,
    cols: &[F],
    out_node: usize,
    gy: &[F],
) {
    let sx = nodes[x.0].value.shape();
    let sw = nodes[w.0].value.shape();
    let so = nodes[out_node].value.shape();
    let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
    let (cout, cg, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
    let (oh, ow) = (so[2], so[3]);
    let og = cout / groups;
    let kk = cg * kh * kw;
    let n = batch * oh * ow;

    if let Some(bid) = b {
        if nodes[bid.0].needs_grad {
            let gb = ensure_grad(grads, nodes, bid);
            for bi in 0..batch {
                for o in 0..cout {
                    let start = (bi * cout + o) * oh * ow;
                    let mut acc = F::zero();
                    for &v in &gy[start..start + oh * ow] {
                        acc = acc + v;
                    }
                    gb[o] = gb[o] + acc;
                }
            }
        }
    }

    // Output gradient regrouped as [Cout][B*OH*OW] rows.
    let mut grows = vec![F::zero(); cout * n];
    for bi in 0..batch {
        for o in 0..cout {
            let src = (bi * cout + o) * oh * ow;
            let dst = o * n + bi * oh * ow;
            grows[dst..dst + oh * ow].copy_from_slice(&gy[src..src + oh * ow]);
        }
    }

    if nodes[w.0].needs_grad {
        let gw = ensure_grad(grads, nodes, w);
        for g in 0..groups {
            let gcols = &cols[g * kk * n..(g + 1) * kk * n];
            for ol in 0..og {
                let o = g * og + ol;
                let grow = &grows[o * n..(o + 1) * n];
                let gwrow = &mut gw[o * kk..(o + 1) * kk];
                for (k, gv) in gwrow.iter_mut().enumerate() {
                    let crow = &gcols[k * n..(k + 1) * n];
                    let mut acc = F::zero();
                    for (gy_v, cv) in grow.iter().zip(crow) {
                        acc = acc + *gy_v * *cv;
                    }
                    *gv = *gv + acc;
                }
            }
        }
    }

    if nodes[x.0].needs_grad {
        let dw = nodes[w.0].value.data();
        let gx = ensure_grad(grads, nodes, x);
        let mut dcol = vec![F::zero(); kk * n];
        for g in 0..groups {
            dcol.iter_mut().for_each(|v| *v = F::zero());
            for ol in 0..og {
                let o = g * og + ol;
                let grow = &grows[o * n..(o + 1) * n];
                let wrow = &dw[o * kk..(o + 1) * kk];
                for (k, &wv) in wrow.iter().enumerate() {
                    let drow = &mut dcol[k * n..(k + 1) * n];
                    for (dv, gv) in drow.iter_mut().zip(grow) {
                        *dv = *dv + wv * *gv;
                    }
                }
            }
            // col2im scatter-add in fixed (k, b, y, x) order.
            for cl in 0..cg {
                let c = g * cg + cl;
                for r in 0..kh {
                    let (ylo, yhi) = conv_range(r, padding, stride, h, oh);
                    for t in 0..kw {
                        let (xlo, xhi) = conv_range(t, padding, stride, wd, ow);
                        if ylo > yhi || xlo > xhi {
                            continue;
                        }
                        let k = (cl * kh + r) * kw + t;
                        let drow = &dcol[k * n..(k + 1) * n];
                        for bi in 0..batch {
                            let gxc = &mut gx[(bi * cin + c) * h * wd..(bi * cin + c + 1) * h * wd];
                            let db = &drow[bi * oh * ow..(bi + 1) * oh * ow];
                            for y in ylo..=yhi {
                                let iy = y * stride + r - padding;
                                let gxrow = &mut gxc[iy * wd..(iy + 1) * wd];
                                let drow_y = &db[y * ow..(y + 1) * ow];
                                for xx in xlo..=xhi {
                                    let ix = xx * stride + t - padding;
                                    gxrow[ix] = gxrow[ix] + drow_y[xx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output positions y with y*stride + r - padding inside [0, len), capped at len_out.
fn conv_range(r: usize, padding: usize, stride: usize, len: usize, len_out: usize) -> (usize, usize) {
    let lo = if r >= padding { 0 } else { (padding - r).div_ceil(stride) };
    let hi_num = len as isize - 1 + padding as isize - r as isize;
    if hi_num < 0 {
        return (1, 0);
    }
    let hi = (hi_num as usize / stride).min(len_out - 1);
    (lo, hi)
}

fn pool_region(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, ((i + 1) * len).div_ceil(out))
}
