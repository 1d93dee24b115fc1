//! Dense row-major `f64` arrays and the numeric kernels the layers are built from.

use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Wraps `data` with `shape`; every extent must be positive and the
    /// extents must multiply to `data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values but {} were supplied",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "extents must be positive, got {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::Shape(format!(
                "{what} must have rank {rank}, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// Strided matrix view descriptor: `(rows, cols, row_stride, col_stride)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c ← alpha·a·b + beta·c` on strided views.
#[allow(clippy::too_many_arguments)] // mirrors the BLAS dgemm argument list
pub(crate) fn gemm(alpha: f64, a: &[f64], la: Layout, b: &[f64], lb: Layout, beta: f64, c: &mut [f64], lc: Layout) {
    assert_eq!(la.cols, lb.rows);
    assert_eq!(la.rows, lc.rows);
    assert_eq!(lb.cols, lc.cols);
    if lc.rows == 0 || lc.cols == 0 {
        return;
    }
    if la.cols == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let span = |l: Layout| (l.rows as isize - 1) * l.rs + (l.cols as isize - 1) * l.cs + 1;
    assert!(span(la) as usize <= a.len());
    assert!(span(lb) as usize <= b.len());
    assert!(span(lc) as usize <= c.len());
    // SAFETY: the three spans were bounds-checked above and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            la.rows,
            la.cols,
            lb.cols,
            alpha,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            lc.rs,
            lc.cs,
        );
    }
}

/// Matrix product of `a[m×k]` and `b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape(format!(
            "matmul needs [m×k]·[k×n], got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(
        1.0,
        &a.data,
        Layout::row_major(m, k),
        &b.data,
        Layout::row_major(k, n),
        0.0,
        &mut out,
        Layout::row_major(m, n),
    );
    Tensor::new(vec![m, n], out)
}

/// Geometry of one 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kh
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kw
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_plane()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kh == 0
            || self.kw == 0
            || self.kh > self.height + 2 * self.pad
            || self.kw > self.width + 2 * self.pad
        {
            return Err(Error::Shape(format!(
                "kernel {}×{} with pad {} does not fit a {}×{} input",
                self.kh, self.kw, self.pad, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Unrolls one sample into a `[C·kh·kw × H'·W']` patch matrix (zero padded).
fn im2col(g: &ConvGeometry, input: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    let pad = g.pad as isize;
    for c in 0..g.in_channels {
        let chan = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for y in 0..oh {
                    let sy = y as isize + i as isize - pad;
                    let line = &mut dst[y * ow..(y + 1) * ow];
                    if sy < 0 || sy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &chan[sy as usize * g.width..(sy as usize + 1) * g.width];
                    for (x, v) in line.iter_mut().enumerate() {
                        let sx = x as isize + j as isize - pad;
                        *v = if sx < 0 || sx >= g.width as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back onto an input-shaped buffer.
fn col2im(g: &ConvGeometry, cols: &[f64], out: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    let pad = g.pad as isize;
    out.fill(0.0);
    for c in 0..g.in_channels {
        let chan = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * plane..(row + 1) * plane];
                for y in 0..oh {
                    let sy = y as isize + i as isize - pad;
                    if sy < 0 || sy >= g.height as isize {
                        continue;
                    }
                    for x in 0..ow {
                        let sx = x as isize + j as isize - pad;
                        if sx >= 0 && sx < g.width as isize {
                            chan[sy as usize * g.width + sx as usize] += src[y * ow + x];
                        }
                    }
                }
            }
        }
    }
}

/// Batched cross-correlation. `input` holds `batch` samples back to back.
pub(crate) fn conv2d_batch(g: &ConvGeometry, input: &[f64], kernels: &[f64], bias: &[f64], batch: usize) -> Vec<f64> {
    let (in_len, out_len, plane, patch) = (g.in_len(), g.out_len(), g.out_plane(), g.patch());
    let mut out = vec![0.0; batch * out_len];
    par::for_each_chunk_mut(&mut out, out_len, |b, dst| {
        let mut cols = vec![0.0; patch * plane];
        im2col(g, &input[b * in_len..(b + 1) * in_len], &mut cols);
        for (o, row) in dst.chunks_mut(plane).enumerate() {
            row.fill(bias[o]);
        }
        gemm(
            1.0,
            kernels,
            Layout::row_major(g.out_channels, patch),
            &cols,
            Layout::row_major(patch, plane),
            1.0,
            dst,
            Layout::row_major(g.out_channels, plane),
        );
    });
    out
}

/// Samples per gradient-accumulation group. Fixed so the summation order,
/// and therefore every bit of the result, is independent of thread count.
const GRAD_GROUP: usize = 8;

/// Batched convolution backward pass: returns `(d_input, d_kernels, d_bias)`.
pub(crate) fn conv2d_backward_batch(
    g: &ConvGeometry,
    input: &[f64],
    kernels: &[f64],
    upstream: &[f64],
    batch: usize,
    need_input_grad: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (in_len, out_len, plane, patch) = (g.in_len(), g.out_len(), g.out_plane(), g.patch());
    let groups = batch.div_ceil(GRAD_GROUP);
    let partial: Vec<Vec<f64>> = par::map_range(groups, |gi| {
        let mut dk = vec![0.0; g.out_channels * patch];
        let mut cols = vec![0.0; patch * plane];
        for b in gi * GRAD_GROUP..((gi + 1) * GRAD_GROUP).min(batch) {
            im2col(g, &input[b * in_len..(b + 1) * in_len], &mut cols);
            gemm(
                1.0,
                &upstream[b * out_len..(b + 1) * out_len],
                Layout::row_major(g.out_channels, plane),
                &cols,
                Layout::row_major(patch, plane).t(),
                1.0,
                &mut dk,
                Layout::row_major(g.out_channels, patch),
            );
        }
        dk
    });
    let mut d_kernels = vec![0.0; g.out_channels * patch];
    for p in &partial {
        for (a, b) in d_kernels.iter_mut().zip(p) {
            *a += b;
        }
    }

    let mut d_bias = vec![0.0; g.out_channels];
    for b in 0..batch {
        let up = &upstream[b * out_len..(b + 1) * out_len];
        for (o, row) in up.chunks(plane).enumerate() {
            d_bias[o] += row.iter().sum::<f64>();
        }
    }

    let d_input = need_input_grad.then(|| {
        let mut d_input = vec![0.0; batch * in_len];
        par::for_each_chunk_mut(&mut d_input, in_len, |b, dst| {
            let mut dcols = vec![0.0; patch * plane];
            gemm(
                1.0,
                kernels,
                Layout::row_major(g.out_channels, patch).t(),
                &upstream[b * out_len..(b + 1) * out_len],
                Layout::row_major(g.out_channels, plane),
                0.0,
                &mut dcols,
                Layout::row_major(patch, plane),
            );
            col2im(g, &dcols, dst);
        });
        d_input
    });
    (d_input, d_kernels, d_bias)
}

fn conv_geometry(input: &Tensor, kernels: &Tensor, bias: &Tensor, pad: usize) -> Result<ConvGeometry> {
    input.expect_rank(3, "conv2d input")?;
    kernels.expect_rank(4, "conv2d kernels")?;
    let g = ConvGeometry {
        in_channels: input.shape[0],
        height: input.shape[1],
        width: input.shape[2],
        out_channels: kernels.shape[0],
        kh: kernels.shape[2],
        kw: kernels.shape[3],
        pad,
    };
    if kernels.shape[1] != g.in_channels {
        return Err(Error::Shape(format!(
            "kernels {:?} expect {} input channels, input is {:?}",
            kernels.shape, kernels.shape[1], input.shape
        )));
    }
    if bias.shape != [g.out_channels] {
        return Err(Error::Shape(format!(
            "bias {:?} does not match {} output channels",
            bias.shape, g.out_channels
        )));
    }
    g.validate()?;
    Ok(g)
}

/// Cross-correlation (no kernel flip) of a `C_in×H×W` input with
/// `C_out×C_in×kh×kw` kernels and zero padding `pad`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, pad: usize) -> Result<Tensor> {
    let g = conv_geometry(input, kernels, bias, pad)?;
    let out = conv2d_batch(&g, &input.data, &kernels.data, &bias.data, 1);
    Tensor::new(vec![g.out_channels, g.out_height(), g.out_width()], out)
}

/// Gradients of a single-sample convolution.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(input: &Tensor, kernels: &Tensor, bias: &Tensor, pad: usize, upstream: &Tensor) -> Result<ConvGrads> {
    let g = conv_geometry(input, kernels, bias, pad)?;
    if upstream.shape != [g.out_channels, g.out_height(), g.out_width()] {
        return Err(Error::Shape(format!(
            "upstream {:?} does not match conv output {:?}",
            upstream.shape,
            [g.out_channels, g.out_height(), g.out_width()]
        )));
    }
    let (di, dk, db) = conv2d_backward_batch(&g, &input.data, &kernels.data, &upstream.data, 1, true);
    Ok(ConvGrads {
        input: Tensor::new(input.shape.clone(), di.expect("requested"))?,
        kernels: Tensor::new(kernels.shape.clone(), dk)?,
        bias: Tensor::new(bias.shape.clone(), db)?,
    })
}

/// 2×2 max pooling over `batch` planes of `channels×h×w`. Returns the pooled
/// buffer and, per output cell, the flat index of the winning input element.
pub(crate) fn maxpool2_batch(input: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let cells = oh * ow;
    let results: Vec<(Vec<f64>, Vec<usize>)> = par::map_range(planes, |p| {
        let base = p * h * w;
        let mut vals = Vec::with_capacity(cells);
        let mut idx = Vec::with_capacity(cells);
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[cand] > input[best] {
                        best = cand;
                    }
                }
                vals.push(input[best]);
                idx.push(best);
            }
        }
        (vals, idx)
    });
    let mut out = Vec::with_capacity(planes * cells);
    let mut arg = Vec::with_capacity(planes * cells);
    for (v, i) in results {
        out.extend(v);
        arg.extend(i);
    }
    (out, arg)
}

/// Routes `upstream` back to the argmax positions of an input of `input_len` values.
pub(crate) fn maxpool2_backward(upstream: &[f64], argmax: &[usize], input_len: usize) -> Vec<f64> {
    let mut grad = vec![0.0; input_len];
    for (&g, &i) in upstream.iter().zip(argmax) {
        grad[i] += g;
    }
    grad
}

/// Non-overlapping 2×2 max pooling of a `C×H×W` tensor (H, W even).
pub fn maxpool2d(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    input.expect_rank(3, "maxpool2d input")?;
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2d needs even extents, got {h}×{w}"
        )));
    }
    let (out, arg) = maxpool2_batch(&input.data, c, h, w);
    Ok((Tensor::new(vec![c, h / 2, w / 2], out)?, arg))
}

pub fn maxpool2d_backward(upstream: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    if upstream.len() != argmax.len() {
        return Err(Error::Shape(format!(
            "{} upstream values for {} pooling windows",
            upstream.len(),
            argmax.len()
        )));
    }
    let n: usize = input_shape.iter().product();
    if argmax.iter().any(|&i| i >= n) {
        return Err(Error::Shape("argmax index outside input".into()));
    }
    Tensor::new(input_shape.to_vec(), maxpool2_backward(&upstream.data, argmax, n))
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    par::map_inplace(&mut out.data, |x| if x > 0.0 { x } else { 0.0 });
    out
}

/// Passes `upstream` where `input > 0`; the derivative at exactly 0 is taken as 0.
pub fn relu_backward(upstream: &Tensor, input: &Tensor) -> Result<Tensor> {
    if upstream.shape != input.shape {
        return Err(Error::Shape(format!(
            "relu_backward shapes differ: {:?} vs {:?}",
            upstream.shape, input.shape
        )));
    }
    let data = upstream
        .data
        .iter()
        .zip(&input.data)
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape.clone(), data)
}

/// Max-shifted softmax of a logit slice, written into `out`.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax over the last axis (a vector, or each row of a matrix).
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = *logits.shape.last().expect("non-empty shape");
    let mut out = logits.clone();
    for (src, dst) in logits.data.chunks(k).zip(out.data.chunks_mut(k)) {
        softmax_into(src, dst);
    }
    out
}

pub fn norm2(t: &Tensor) -> f64 {
    norm2_slice(&t.data)
}

pub(crate) fn norm2_slice(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `alpha·x + y`.
pub fn axpy(alpha: f64, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.shape != y.shape {
        return Err(Error::Shape(format!(
            "axpy shapes differ: {:?} vs {:?}",
            x.shape, y.shape
        )));
    }
    let data = x.data.iter().zip(&y.data).map(|(a, b)| alpha * a + b).collect();
    Tensor::new(x.shape.clone(), data)
}
