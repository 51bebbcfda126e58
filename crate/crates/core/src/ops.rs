//! Primitive operations and their reverse-mode rules.
//!
//! All reductions run in a fixed sequential order so forward and backward
//! results are bit-reproducible. Convolution lowers to a patch matrix
//! (im2col) and three vectorizable loops; no external kernels are used.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A differentiable primitive together with its attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// `[n, k] x [k, m] -> [n, m]`.
    MatMul,
    /// `x [B, ..rest] + b [..rest]`, broadcasting over the leading batch axis.
    AddBias,
    /// Elementwise product of two same-shape tensors.
    Mul,
    Relu,
    /// Inputs `x [B, Cin, H, W]`, `w [Cout, Cin, kh, kw]`, `b [Cout]`.
    Conv2d { stride: usize, padding: usize },
    MaxPool2d { size: usize, stride: usize },
    /// `[B, ..] -> [B, prod(..)]`.
    Flatten,
    /// Per-example cross-entropy of softmax(logits) against integer labels, `[B, C] -> [B]`.
    SoftmaxCrossEntropy { labels: Vec<usize> },
    /// Per-example logit margin `max_{i != y} z_i - z_y`, `[B, C] -> [B]`.
    CwMargin { labels: Vec<usize> },
    /// Mean over the leading axis; `[B] -> [1]`, `[B, ..rest] -> [..rest]`.
    MeanBatch,
    ScalarMul(f32),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::AddBias => "add_bias",
            Primitive::Mul => "mul",
            Primitive::Relu => "relu",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::MaxPool2d { .. } => "maxpool2d",
            Primitive::Flatten => "flatten",
            Primitive::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Primitive::CwMargin { .. } => "cw_margin",
            Primitive::MeanBatch => "mean_batch",
            Primitive::ScalarMul(_) => "scalar_mul",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::MatMul | Primitive::AddBias | Primitive::Mul => 2,
            Primitive::Conv2d { .. } => 3,
            _ => 1,
        }
    }
}

/// Forward values a primitive keeps for its backward rule, beyond its inputs
/// and output.
#[derive(Debug, Clone)]
pub enum Saved {
    None,
    /// Patch matrices `[B][Hout*Wout, Cin*kh*kw]` of a convolution.
    Patches(Vec<f32>),
    /// Flat input index of each pooled maximum.
    Argmax(Vec<usize>),
    /// Softmax probabilities `[B, C]`.
    Probs(Vec<f32>),
    /// Runner-up class of each example for the margin loss.
    RunnerUp(Vec<usize>),
}

/// Evaluates a primitive without recording it.
pub fn apply_primitive(prim: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    forward(prim, inputs).map(|(out, _)| out)
}

pub(crate) fn forward(prim: &Primitive, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    if inputs.len() != prim.arity() {
        return Err(Error::shape(
            prim.name(),
            format!("{} inputs", prim.arity()),
            format!("{} inputs", inputs.len()),
        ));
    }
    let (out, saved) = match prim {
        Primitive::MatMul => (matmul_forward(inputs[0], inputs[1])?, Saved::None),
        Primitive::AddBias => (add_bias_forward(inputs[0], inputs[1])?, Saved::None),
        Primitive::Mul => (inputs[0].zip_map(inputs[1], |a, b| a * b)?, Saved::None),
        Primitive::Relu => (inputs[0].map(|v| v.max(0.0)), Saved::None),
        Primitive::Conv2d { stride, padding } => {
            let (out, patches) = conv2d_forward(inputs[0], inputs[1], inputs[2], *stride, *padding)?;
            (out, Saved::Patches(patches))
        }
        Primitive::MaxPool2d { size, stride } => {
            let (out, argmax) = maxpool_forward(inputs[0], *size, *stride)?;
            (out, Saved::Argmax(argmax))
        }
        Primitive::Flatten => {
            let x = inputs[0];
            if x.rank() < 2 {
                return Err(Error::shape("flatten", "rank >= 2", format!("{:?}", x.shape())));
            }
            (x.clone().reshape(vec![x.batch(), x.row_len()])?, Saved::None)
        }
        Primitive::SoftmaxCrossEntropy { labels } => {
            let (out, probs) = softmax_ce_forward(inputs[0], labels)?;
            (out, Saved::Probs(probs))
        }
        Primitive::CwMargin { labels } => {
            let (out, runner) = cw_margin_forward(inputs[0], labels)?;
            (out, Saved::RunnerUp(runner))
        }
        Primitive::MeanBatch => (mean_batch_forward(inputs[0])?, Saved::None),
        Primitive::ScalarMul(s) => (inputs[0].scale(*s), Saved::None),
    };
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("{} output", prim.name())));
    }
    Ok((out, saved))
}

/// Vector-Jacobian product: gradients of the loss with respect to each input.
pub(crate) fn backward(
    prim: &Primitive,
    inputs: &[&Tensor],
    saved: &Saved,
    grad_out: &Tensor,
) -> Result<Vec<Tensor>> {
    Ok(match prim {
        Primitive::MatMul => {
            let (ga, gb) = matmul_backward(inputs[0], inputs[1], grad_out);
            vec![ga, gb]
        }
        Primitive::AddBias => {
            let b = inputs[1];
            let len = b.numel();
            let mut gb = vec![0.0f32; len];
            for row in grad_out.data().chunks_exact(len) {
                for (acc, &g) in gb.iter_mut().zip(row) {
                    *acc += g;
                }
            }
            vec![grad_out.clone(), Tensor::new(b.shape().to_vec(), gb)?]
        }
        Primitive::Mul => vec![
            grad_out.zip_map(inputs[1], |g, b| g * b)?,
            grad_out.zip_map(inputs[0], |g, a| g * a)?,
        ],
        Primitive::Relu => vec![grad_out.zip_map(inputs[0], |g, x| if x > 0.0 { g } else { 0.0 })?],
        Primitive::Conv2d { stride, padding } => {
            let Saved::Patches(patches) = saved else {
                return Err(Error::Tape("conv2d backward without saved patches".into()));
            };
            let (gx, gw, gb) = conv2d_backward(inputs[0], inputs[1], patches, grad_out, *stride, *padding);
            vec![gx, gw, gb]
        }
        Primitive::MaxPool2d { .. } => {
            let Saved::Argmax(argmax) = saved else {
                return Err(Error::Tape("maxpool backward without saved argmax".into()));
            };
            let mut gx = vec![0.0f32; inputs[0].numel()];
            for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
                gx[idx] += g;
            }
            vec![Tensor::new(inputs[0].shape().to_vec(), gx)?]
        }
        Primitive::Flatten => vec![grad_out.clone().reshape(inputs[0].shape().to_vec())?],
        Primitive::SoftmaxCrossEntropy { labels } => {
            let Saved::Probs(probs) = saved else {
                return Err(Error::Tape("cross-entropy backward without saved probabilities".into()));
            };
            let classes = inputs[0].row_len();
            let mut gx = probs.clone();
            for (b, (row, &y)) in gx.chunks_exact_mut(classes).zip(labels).enumerate() {
                row[y] -= 1.0;
                let g = grad_out.data()[b];
                for v in row.iter_mut() {
                    *v *= g;
                }
            }
            vec![Tensor::new(inputs[0].shape().to_vec(), gx)?]
        }
        Primitive::CwMargin { labels } => {
            let Saved::RunnerUp(runner) = saved else {
                return Err(Error::Tape("margin backward without saved runner-up".into()));
            };
            let classes = inputs[0].row_len();
            let mut gx = vec![0.0f32; inputs[0].numel()];
            for (b, (&y, &j)) in labels.iter().zip(runner).enumerate() {
                let g = grad_out.data()[b];
                gx[b * classes + j] += g;
                gx[b * classes + y] -= g;
            }
            vec![Tensor::new(inputs[0].shape().to_vec(), gx)?]
        }
        Primitive::MeanBatch => {
            let x = inputs[0];
            let scale = 1.0 / x.batch() as f32;
            let len = x.row_len();
            let mut gx = Vec::with_capacity(x.numel());
            for _ in 0..x.batch() {
                gx.extend(grad_out.data()[..len].iter().map(|&g| g * scale));
            }
            vec![Tensor::new(x.shape().to_vec(), gx)?]
        }
        Primitive::ScalarMul(s) => vec![grad_out.scale(*s)],
    })
}

// ---------------------------------------------------------------------------
// dense kernels

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(op, format!("rank {rank}"), format!("{:?}", t.shape())));
    }
    Ok(())
}

/// `out[n, m] += a[n, k] * b[k, m]`, accumulating over `k` in order.
fn gemm_acc(a: &[f32], b: &[f32], out: &mut [f32], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * m..(kk + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank("matmul", a, 2)?;
    expect_rank("matmul", b, 2)?;
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let (k2, m) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("rhs with {k} rows"),
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0f32; n * m];
    gemm_acc(a.data(), b.data(), &mut out, n, k, m);
    Tensor::new(vec![n, m], out)
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    // ga = g * b^T
    let bt = transpose(b.data(), k, m);
    let mut ga = vec![0.0f32; n * k];
    gemm_acc(g.data(), &bt, &mut ga, n, m, k);
    // gb = a^T * g
    let at = transpose(a.data(), n, k);
    let mut gb = vec![0.0f32; k * m];
    gemm_acc(&at, g.data(), &mut gb, k, n, m);
    (
        Tensor::new(vec![n, k], ga).expect("matmul grad shape"),
        Tensor::new(vec![k, m], gb).expect("matmul grad shape"),
    )
}

fn add_bias_forward(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 || x.shape()[1..] != *b.shape() {
        return Err(Error::shape(
            "add_bias",
            format!("bias shape equal to {:?}", x.shape().get(1..).unwrap_or(&[])),
            format!("{:?}", b.shape()),
        ));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(b.numel()) {
        for (o, &bv) in row.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub(crate) fn new(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                "x [B, Cin, H, W] and w [Cout, Cin, kh, kw]",
                format!("{x:?} and {w:?}"),
            ));
        }
        if x[1] != w[1] {
            return Err(Error::shape(
                "conv2d",
                format!("{} input channels", w[1]),
                format!("{} input channels", x[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (ph, pw) = (x[2] + 2 * padding, x[3] + 2 * padding);
        if w[2] > ph || w[3] > pw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel no larger than padded input {ph}x{pw}"),
                format!("kernel {}x{}", w[2], w[3]),
            ));
        }
        Ok(Self {
            batch: x[0],
            in_c: x[1],
            h: x[2],
            w: x[3],
            out_c: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            padding,
            out_h: (ph - w[2]) / stride + 1,
            out_w: (pw - w[3]) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input offset feeding patch column `col` at output position `(oy, ox)`,
    /// or `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, col: usize) -> Option<usize> {
        let kj = col % self.kw;
        let ki = (col / self.kw) % self.kh;
        let c = col / (self.kw * self.kh);
        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
        let ix = (ox * self.stride + kj) as isize - self.padding as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            None
        } else {
            Some((c * self.h + iy as usize) * self.w + ix as usize)
        }
    }
}

/// Patch matrix `[positions, Cin*kh*kw]` for one image.
fn im2col(img: &[f32], geo: &ConvGeometry, out: &mut [f32]) {
    let plen = geo.patch_len();
    for oy in 0..geo.out_h {
        for ox in 0..geo.out_w {
            let row = &mut out[(oy * geo.out_w + ox) * plen..][..plen];
            for (col, v) in row.iter_mut().enumerate() {
                *v = geo.source(oy, ox, col).map_or(0.0, |i| img[i]);
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Result<(Tensor, Vec<f32>)> {
    let geo = ConvGeometry::new(x.shape(), w.shape(), stride, padding)?;
    if b.shape() != [geo.out_c] {
        return Err(Error::shape("conv2d", format!("bias [{}]", geo.out_c), format!("{:?}", b.shape())));
    }
    let plen = geo.patch_len();
    let pos = geo.positions();
    let img_len = geo.in_c * geo.h * geo.w;
    let wt = transpose(w.data(), geo.out_c, plen);
    let mut patches = vec![0.0f32; geo.batch * pos * plen];
    let mut out = vec![0.0f32; geo.batch * geo.out_c * pos];
    let mut out_t = vec![0.0f32; pos * geo.out_c];
    for n in 0..geo.batch {
        let p = &mut patches[n * pos * plen..(n + 1) * pos * plen];
        im2col(&x.data()[n * img_len..(n + 1) * img_len], &geo, p);
        // out_t[pos, Cout] = patches[pos, K] * w^T[K, Cout]
        for (row, bias) in out_t.chunks_exact_mut(geo.out_c).zip(std::iter::repeat(b.data())) {
            row.copy_from_slice(bias);
        }
        gemm_acc(p, &wt, &mut out_t, pos, plen, geo.out_c);
        let dst = &mut out[n * geo.out_c * pos..(n + 1) * geo.out_c * pos];
        for q in 0..pos {
            for c in 0..geo.out_c {
                dst[c * pos + q] = out_t[q * geo.out_c + c];
            }
        }
    }
    let out = Tensor::new(vec![geo.batch, geo.out_c, geo.out_h, geo.out_w], out)?;
    Ok((out, patches))
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    patches: &[f32],
    g: &Tensor,
    stride: usize,
    padding: usize,
) -> (Tensor, Tensor, Tensor) {
    let geo = ConvGeometry::new(x.shape(), w.shape(), stride, padding).expect("validated in forward");
    let plen = geo.patch_len();
    let pos = geo.positions();
    let img_len = geo.in_c * geo.h * geo.w;
    let mut gx = vec![0.0f32; x.numel()];
    let mut gwt = vec![0.0f32; plen * geo.out_c];
    let mut gb = vec![0.0f32; geo.out_c];
    let mut g_t = vec![0.0f32; pos * geo.out_c];
    let mut gpatch = vec![0.0f32; pos * plen];
    for n in 0..geo.batch {
        let gn = &g.data()[n * geo.out_c * pos..(n + 1) * geo.out_c * pos];
        for c in 0..geo.out_c {
            for q in 0..pos {
                g_t[q * geo.out_c + c] = gn[c * pos + q];
            }
        }
        for row in g_t.chunks_exact(geo.out_c) {
            for (acc, &v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let p = &patches[n * pos * plen..(n + 1) * pos * plen];
        // gw^T[K, Cout] += patches^T[K, pos] * g_t[pos, Cout]
        for q in 0..pos {
            let g_row = &g_t[q * geo.out_c..(q + 1) * geo.out_c];
            for (kk, &pv) in p[q * plen..(q + 1) * plen].iter().enumerate() {
                if pv == 0.0 {
                    continue;
                }
                for (acc, &gv) in gwt[kk * geo.out_c..(kk + 1) * geo.out_c].iter_mut().zip(g_row) {
                    *acc += pv * gv;
                }
            }
        }
        // gpatch[pos, K] = g_t[pos, Cout] * w[Cout, K]
        gpatch.iter_mut().for_each(|v| *v = 0.0);
        gemm_acc(&g_t, w.data(), &mut gpatch, pos, geo.out_c, plen);
        // col2im
        let gxn = &mut gx[n * img_len..(n + 1) * img_len];
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                let row = &gpatch[(oy * geo.out_w + ox) * plen..][..plen];
                for (col, &v) in row.iter().enumerate() {
                    if let Some(i) = geo.source(oy, ox, col) {
                        gxn[i] += v;
                    }
                }
            }
        }
    }
    let gw = transpose(&gwt, plen, geo.out_c);
    (
        Tensor::new(x.shape().to_vec(), gx).expect("conv grad shape"),
        Tensor::new(w.shape().to_vec(), gw).expect("conv grad shape"),
        Tensor::new(vec![geo.out_c], gb).expect("conv grad shape"),
    )
}

// ---------------------------------------------------------------------------
// pooling

pub(crate) fn pool_output(h: usize, w: usize, size: usize, stride: usize) -> Result<(usize, usize)> {
    if size == 0 || stride == 0 {
        return Err(Error::InvalidArgument("maxpool size and stride must be >= 1".into()));
    }
    if size > h || size > w {
        return Err(Error::shape("maxpool2d", format!("window <= {h}x{w}"), format!("window {size}")));
    }
    Ok(((h - size) / stride + 1, (w - size) / stride + 1))
}

fn maxpool_forward(x: &Tensor, size: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    expect_rank("maxpool2d", x, 4)?;
    let [b, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (oh, ow) = pool_output(h, w, size, stride)?;
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    let data = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = base + (oy * stride + dy) * w + ox * stride + dx;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![b, c, oh, ow], out)?, argmax))
}

// ---------------------------------------------------------------------------
// losses

fn check_labels(op: &'static str, logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    expect_rank(op, logits, 2)?;
    let (b, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::shape(op, format!("{b} labels"), format!("{} labels", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok((b, classes))
}

fn softmax_ce_forward(logits: &Tensor, labels: &[usize]) -> Result<(Tensor, Vec<f32>)> {
    let (b, classes) = check_labels("softmax_cross_entropy", logits, labels)?;
    let mut probs = vec![0.0f32; b * classes];
    let mut losses = Vec::with_capacity(b);
    for (i, (row, &y)) in logits.data().chunks_exact(classes).zip(labels).enumerate() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for &z in row {
            sum += ((z - max) as f64).exp();
        }
        let log_sum = sum.ln();
        for (p, &z) in probs[i * classes..(i + 1) * classes].iter_mut().zip(row) {
            *p = (((z - max) as f64) - log_sum).exp() as f32;
        }
        losses.push((log_sum - (row[y] - max) as f64) as f32);
    }
    Ok((Tensor::new(vec![b], losses)?, probs))
}

fn cw_margin_forward(logits: &Tensor, labels: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let (b, classes) = check_labels("cw_margin", logits, labels)?;
    if classes < 2 {
        return Err(Error::InvalidArgument("margin loss needs at least 2 classes".into()));
    }
    let mut margins = Vec::with_capacity(b);
    let mut runner = Vec::with_capacity(b);
    for (row, &y) in logits.data().chunks_exact(classes).zip(labels) {
        let mut best: Option<usize> = None;
        for (i, &z) in row.iter().enumerate() {
            if i != y && best.is_none_or(|j| z > row[j]) {
                best = Some(i);
            }
        }
        let j = best.expect("at least two classes");
        margins.push(row[j] - row[y]);
        runner.push(j);
    }
    Ok((Tensor::new(vec![b], margins)?, runner))
}

fn mean_batch_forward(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(Error::shape("mean_batch", "rank >= 1", "scalar"));
    }
    let len = x.row_len();
    let mut acc = vec![0.0f64; len];
    for row in x.data().chunks_exact(len) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    let inv = x.batch() as f64;
    let out: Vec<f32> = acc.iter().map(|&a| (a / inv) as f32).collect();
    let shape = if x.rank() == 1 { vec![1] } else { x.shape()[1..].to_vec() };
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let out = apply_primitive(&Primitive::Relu, &[&Tensor::from_vec(vec![-1.0, 2.0])]).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0]);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::full(&[1, 10], 0.37);
        for y in 0..10 {
            let out = apply_primitive(&Primitive::SoftmaxCrossEntropy { labels: vec![y] }, &[&logits]).unwrap();
            assert!((out.item() - 10f32.ln()).abs() < 1e-6, "{}", out.item());
        }
        assert!((10f32.ln() - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[3, 3], &mut rng);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let out = apply_primitive(&Primitive::MatMul, &[&eye, &a]).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_reports_shapes() {
        let err = apply_primitive(&Primitive::MatMul, &[&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[1, 1, 5, 5], &mut rng);
        let w = random(&[1, 1, 3, 3], &mut rng);
        let b = Tensor::zeros(&[1]);
        let out = apply_primitive(&Primitive::Conv2d { stride: 1, padding: 0 }, &[&x, &w, &b]).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        for oy in 0..3 {
            for ox in 0..3 {
                let mut acc = 0.0f64;
                for ki in 0..3 {
                    for kj in 0..3 {
                        acc += x.data()[(oy + ki) * 5 + ox + kj] as f64 * w.data()[ki * 3 + kj] as f64;
                    }
                }
                let got = out.data()[oy * 3 + ox] as f64;
                assert!((got - acc).abs() <= 1e-6, "({oy},{ox}) {got} vs {acc}");
            }
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert!(apply_primitive(&Primitive::Conv2d { stride: 1, padding: 0 }, &[&x, &w, &b]).is_err());
        assert!(apply_primitive(&Primitive::Conv2d { stride: 1, padding: 1 }, &[&x, &w, &b]).is_ok());
        assert!(apply_primitive(&Primitive::Conv2d { stride: 0, padding: 1 }, &[&x, &w, &b]).is_err());
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let (out, argmax) = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(out.data(), &[1.0]);
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn margin_examples() {
        let logits = Tensor::new(vec![1, 3], vec![10.0, 0.0, 0.0]).unwrap();
        let m = apply_primitive(&Primitive::CwMargin { labels: vec![0] }, &[&logits]).unwrap();
        assert_eq!(m.item(), -10.0);
        let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let m = apply_primitive(&Primitive::CwMargin { labels: vec![0] }, &[&logits]).unwrap();
        assert_eq!(m.item(), 0.0);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::zeros(&[1, 3]);
        let err = apply_primitive(&Primitive::SoftmaxCrossEntropy { labels: vec![3] }, &[&logits]).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 3, classes: 3 }));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = Tensor::from_vec(vec![f32::MAX, 1.0]);
        let err = apply_primitive(&Primitive::ScalarMul(4.0), &[&x]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn mean_batch_shapes() {
        let x = Tensor::from_vec(vec![4.0, 6.0]);
        let out = apply_primitive(&Primitive::MeanBatch, &[&x]).unwrap();
        assert_eq!((out.shape(), out.item()), (&[1usize][..], 5.0));
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = apply_primitive(&Primitive::MeanBatch, &[&x]).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0]);
    }
}
