use std::cmp::Ordering;

use super::Tensor;
use crate::error::{Error, Result};

const MR: usize = 4;
const NB: usize = 32;

/// `c[m x n] = a[m x k] * b[k x n]`, overwriting `c`.
///
/// Each output element is the sum over ascending `k` starting from `0.0`.
/// Tiles of `MR x NB` outputs stay in registers across the whole `k` loop;
/// vector lanes only ever span independent output columns, so the result is
/// the same as the naive triple loop bit for bit.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if k == 0 {
        c.fill(0.0);
        return;
    }
    let mut i = 0;
    while i < m {
        let rows = (m - i).min(MR);
        let arows: [&[f32]; MR] = std::array::from_fn(|r| {
            let r = i + r.min(rows - 1);
            &a[r * k..(r + 1) * k]
        });
        let mut j = 0;
        while j < n {
            let cols = (n - j).min(NB);
            let acc = tile(arows, b, n, j, cols);
            for (r, accr) in acc.iter().enumerate().take(rows) {
                c[(i + r) * n + j..(i + r) * n + j + cols].copy_from_slice(&accr[..cols]);
            }
            j += NB;
        }
        i += MR;
    }
}

/// One `MR x NB` output tile. Missing rows repeat the last real row and
/// missing columns read zeros; both are discarded by the caller.
#[inline(always)]
fn tile(arows: [&[f32]; MR], b: &[f32], n: usize, j: usize, cols: usize) -> [[f32; NB]; MR] {
    let k = arows[0].len();
    let [a0, a1, a2, a3] = arows;
    let (a1, a2, a3) = (&a1[..k], &a2[..k], &a3[..k]);
    let mut c0 = [0f32; NB];
    let mut c1 = [0f32; NB];
    let mut c2 = [0f32; NB];
    let mut c3 = [0f32; NB];
    for p in 0..k {
        let mut bv = [0f32; NB];
        if cols == NB {
            bv.copy_from_slice(&b[p * n + j..p * n + j + NB]);
        } else {
            bv[..cols].copy_from_slice(&b[p * n + j..p * n + j + cols]);
        }
        let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
        for q in 0..NB {
            c0[q] += x0 * bv[q];
            c1[q] += x1 * bv[q];
            c2[q] += x2 * bv[q];
            c3[q] += x3 * bv[q];
        }
    }
    [c0, c1, c2, c3]
}

fn transpose_raw(rows: usize, cols: usize, src: &[f32], dst: &mut [f32]) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension(format!("{what} must be 2-D, got {s:?}"))),
    }
}

pub fn transpose2d(t: &Tensor) -> Result<Tensor> {
    let (r, c) = dims2(t, "transpose input")?;
    let mut out = vec![0.0; r * c];
    transpose_raw(r, c, t.data(), &mut out);
    Tensor::new(vec![c, r], out)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dims differ: {m}x{k} * {k2}x{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), b.data(), &mut out);
    Tensor::new(vec![m, n], out)
}

/// Gradients of `c = a * b` given `dL/dc`: returns `(dL/da, dL/db)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_c: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (_, n) = dims2(b, "matmul rhs")?;
    if grad_c.shape() != [m, n] {
        return Err(Error::Dimension(format!(
            "gradient shape {:?} does not match output {m}x{n}",
            grad_c.shape()
        )));
    }
    let bt = transpose2d(b)?;
    let at = transpose2d(a)?;
    let mut ga = vec![0.0; m * k];
    gemm(m, n, k, grad_c.data(), bt.data(), &mut ga);
    let mut gb = vec![0.0; k * n];
    gemm(k, m, n, at.data(), grad_c.data(), &mut gb);
    Ok((Tensor::new(vec![m, k], ga)?, Tensor::new(vec![k, n], gb)?))
}

/// Output extent of a convolution or pooling window along one axis.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Dimension("stride must be at least 1".into()));
    }
    if kernel == 0 || kernel > input + 2 * pad {
        return Err(Error::Dimension(format!(
            "kernel {kernel} does not fit input {input} with padding {pad}"
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// Calls `f(k, p, src_offset)` for every in-bounds (kernel tap, output
    /// position) pair. Padded taps are skipped.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let ow = self.ow;
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let k = (ci * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            f(k, oy * ow + ox, (ci * self.h + iy as usize) * self.w + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        cols.fill(0.0);
        let p = self.p();
        self.for_each_tap(|k, pos, src| cols[k * p + pos] = x[src]);
    }

    fn col2im_add(&self, cols: &[f32], gx: &mut [f32]) {
        let p = self.p();
        self.for_each_tap(|k, pos, src| gx[src] += cols[k * p + pos]);
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
    let [b, cin, h, wd] = *x.shape() else {
        return Err(Error::Dimension(format!(
            "conv2d input must be B x C x H x W, got {:?}",
            x.shape()
        )));
    };
    let [cout, wcin, kh, kw] = *w.shape() else {
        return Err(Error::Dimension(format!(
            "conv2d weight must be Cout x Cin x kh x kw, got {:?}",
            w.shape()
        )));
    };
    if wcin != cin {
        return Err(Error::Dimension(format!(
            "conv2d weight expects {wcin} input channels, input has {cin}"
        )));
    }
    let oh = conv_output_dim(h, kh, stride, pad)?;
    let ow = conv_output_dim(wd, kw, stride, pad)?;
    Ok((
        b,
        cout,
        ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad,
        },
    ))
}

/// Direct cross-correlation with zero padding. Each output is the sum over
/// `(ci, ky, kx)` in ascending order, then the bias is added.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, cout, g) = conv_geom(x, w, stride, pad)?;
    if bias.len() != cout {
        return Err(Error::Dimension(format!(
            "conv2d bias has {} entries for {cout} output channels",
            bias.len()
        )));
    }
    let (k, p) = (g.k(), g.p());
    let in_stride = g.cin * g.h * g.w;
    let mut cols = vec![0.0; k * p];
    let mut out = vec![0.0; b * cout * p];
    for (s, out_s) in out.chunks_exact_mut(cout * p).enumerate() {
        g.im2col(&x.data()[s * in_stride..(s + 1) * in_stride], &mut cols);
        gemm(cout, k, p, w.data(), &cols, out_s);
        for (row, &bv) in out_s.chunks_exact_mut(p).zip(bias.data()) {
            for v in row {
                *v += bv;
            }
        }
    }
    Tensor::new(vec![b, cout, g.oh, g.ow], out)
}

/// Returns `(dL/dx, dL/dw, dL/dbias)`. Batch contributions to the weight and
/// bias gradients are summed in ascending sample order.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (gx, gw, gb) = conv2d_backward_opt(x, w, grad_out, stride, pad, true)?;
    Ok((gx.expect("requested"), gw, gb))
}

/// [`conv2d_backward`] that skips the input gradient unless `input_grad`.
pub(crate) fn conv2d_backward_opt(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    input_grad: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (b, cout, g) = conv_geom(x, w, stride, pad)?;
    if grad_out.shape() != [b, cout, g.oh, g.ow] {
        return Err(Error::Dimension(format!(
            "conv2d gradient shape {:?} does not match output",
            grad_out.shape()
        )));
    }
    let (k, p) = (g.k(), g.p());
    let in_stride = g.cin * g.h * g.w;
    let mut wt = vec![0.0; k * cout];
    transpose_raw(cout, k, w.data(), &mut wt);

    let mut cols = vec![0.0; k * p];
    let mut cols_t = vec![0.0; p * k];
    let mut dcols = vec![0.0; k * p];
    let mut gw_s = vec![0.0; cout * k];
    let mut gw = vec![0.0; cout * k];
    let mut gb = vec![0.0; cout];
    let mut gx = vec![0.0; if input_grad { x.len() } else { 0 }];

    for s in 0..b {
        let xs = &x.data()[s * in_stride..(s + 1) * in_stride];
        let gs = &grad_out.data()[s * cout * p..(s + 1) * cout * p];
        g.im2col(xs, &mut cols);
        transpose_raw(k, p, &cols, &mut cols_t);
        gemm(cout, p, k, gs, &cols_t, &mut gw_s);
        for (acc, v) in gw.iter_mut().zip(&gw_s) {
            *acc += v;
        }
        for (acc, row) in gb.iter_mut().zip(gs.chunks_exact(p)) {
            let mut sum = 0.0;
            for v in row {
                sum += v;
            }
            *acc += sum;
        }
        if input_grad {
            gemm(k, cout, p, &wt, gs, &mut dcols);
            g.col2im_add(&dcols, &mut gx[s * in_stride..(s + 1) * in_stride]);
        }
    }
    Ok((
        if input_grad { Some(Tensor::new(x.shape().to_vec(), gx)?) } else { None },
        Tensor::new(w.shape().to_vec(), gw)?,
        Tensor::new(vec![cout], gb)?,
    ))
}

/// Element-wise `max(0, x)`. NaN propagates.
pub fn relu(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| if v < 0.0 { 0.0 } else { v })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Passes `grad` where the forward input was positive.
pub fn relu_backward(input: &Tensor, grad: &Tensor) -> Result<Tensor> {
    if input.shape() != grad.shape() {
        return Err(Error::Dimension("relu gradient shape mismatch".into()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Non-overlapping `size x size` max pooling (stride = size, floor).
/// Returns the pooled tensor and, per output, the flat input index it came from.
pub(crate) fn max_pool2d_indexed(x: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    let [b, c, h, w] = *x.shape() else {
        return Err(Error::Dimension(format!(
            "max_pool2d input must be B x C x H x W, got {:?}",
            x.shape()
        )));
    };
    let oh = conv_output_dim(h, size, size, 0)?;
    let ow = conv_output_dim(w, size, size, 0)?;
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut idx = Vec::with_capacity(b * c * oh * ow);
    let data = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = base + oy * size * w + ox * size;
                let mut best = data[best_i];
                for dy in 0..size {
                    for dx in 0..size {
                        let i = base + (oy * size + dy) * w + ox * size + dx;
                        let v = data[i];
                        if v > best || (v.is_nan() && !best.is_nan()) {
                            best = v;
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                idx.push(best_i);
            }
        }
    }
    Ok((Tensor::new(vec![b, c, oh, ow], out)?, idx))
}

pub fn max_pool2d(x: &Tensor, size: usize) -> Result<Tensor> {
    max_pool2d_indexed(x, size).map(|(t, _)| t)
}

pub fn max_pool2d_backward(input_shape: &[usize], argmax: &[usize], grad: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad.len() {
        return Err(Error::Dimension("max_pool2d gradient shape mismatch".into()));
    }
    let mut gx = Tensor::zeros(input_shape);
    let data = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad.data()) {
        data[i] += g;
    }
    Ok(gx)
}

/// Per-channel `x * scale[c] + shift[c]` for `B x C x ...` inputs; this is
/// batch normalisation in its folded inference form.
pub fn batch_norm_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (b, c) = match x.shape() {
        [b, c, ..] => (*b, *c),
        s => {
            return Err(Error::Dimension(format!(
                "batch norm input needs a channel axis, got {s:?}"
            )))
        }
    };
    if scale.len() != c || shift.len() != c {
        return Err(Error::Dimension(format!(
            "batch norm has {}/{} parameters for {c} channels",
            scale.len(),
            shift.len()
        )));
    }
    let inner = x.len().checked_div(b * c).unwrap_or(0);
    let mut out = x.data().to_vec();
    for (plane, chunk) in out.chunks_mut(inner.max(1)).enumerate() {
        let ch = plane % c;
        let (s, t) = (scale.data()[ch], shift.data()[ch]);
        for v in chunk {
            *v = *v * s + t;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Mean cross-entropy over the batch and the softmax probabilities.
///
/// Rows are shifted by their maximum before exponentiation, and the per-row
/// loss is computed as `log(sum exp(z - max)) - (z_label - max)`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let (b, c) = dims2(logits, "logits")?;
    if labels.len() != b {
        return Err(Error::Dimension(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if c == 0 {
        return Err(Error::Dimension("logits have zero classes".into()));
    }
    let mut probs = vec![0.0f32; b * c];
    let mut total = 0.0f64;
    for (i, (row, prow)) in logits
        .data()
        .chunks_exact(c)
        .zip(probs.chunks_exact_mut(c))
        .enumerate()
    {
        let label = labels[i];
        if label >= c {
            return Err(Error::Index(format!("label {label} out of range for {c} classes")));
        }
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for (p, &z) in prow.iter_mut().zip(row) {
            *p = (z - max).exp();
            sum += *p;
        }
        for p in prow.iter_mut() {
            *p /= sum;
        }
        total += (sum.ln() - (row[label] - max)) as f64;
    }
    let loss = if b == 0 { 0.0 } else { (total / b as f64) as f32 };
    Ok((loss, Tensor::new(vec![b, c], probs)?))
}

/// Gradient of the mean cross-entropy with respect to the logits.
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = dims2(probs, "probs")?;
    if labels.len() != b {
        return Err(Error::Dimension("label count mismatch".into()));
    }
    let scale = 1.0 / b as f32;
    let mut g = probs.data().to_vec();
    for (row, &label) in g.chunks_exact_mut(c).zip(labels) {
        if label >= c {
            return Err(Error::Index(format!("label {label} out of range for {c} classes")));
        }
        row[label] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Tensor::new(vec![b, c], g)
}

fn rank_order(v: &[f32], a: usize, b: usize) -> Ordering {
    v[b].total_cmp(&v[a]).then(a.cmp(&b))
}

/// The `k` largest entries, descending, ties broken by ascending index.
/// Values are ordered by IEEE total order, so NaN sorts deterministically.
pub fn topk(v: &[f32], k: usize) -> Result<Vec<(usize, f32)>> {
    if k == 0 || k > v.len() {
        return Err(Error::Argument(format!(
            "k = {k} out of range for {} values",
            v.len()
        )));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    if k < v.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(v, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(v, a, b));
    Ok(idx.into_iter().map(|i| (i, v[i])).collect())
}

/// Index of the largest entry under the same ordering as [`topk`].
pub fn argmax(v: &[f32]) -> usize {
    (0..v.len())
        .min_by(|&a, &b| rank_order(v, a, b))
        .expect("argmax of an empty slice")
}
