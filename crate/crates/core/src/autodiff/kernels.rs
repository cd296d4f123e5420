//! Forward and backward kernels for the differentiable primitives.
//!
//! Everything here is a pure function of its arguments. Convolution lowers
//! each sample to an im2col matrix and runs a single GEMM per sample, so
//! per-sample results never depend on how samples are batched. The GEMMs
//! run in `f64`, and results are rounded to `f32` once at the end.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

/// Geometry of one convolution, resolved and validated once.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn resolve(input: &Tensor, weight: &Tensor, params: Conv2dParams) -> Result<Self> {
        let [n, cin, h, w] = input.dims4("conv2d input")?;
        let [cout, wcin, kh, kw] = weight.dims4("conv2d weight")?;
        if params.stride == 0 {
            return Err(Error::invalid("conv2d stride", "must be at least 1"));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::invalid("conv2d kernel", format!("{kh}x{kw}")));
        }
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("weight expects {wcin} input channels, input has {cin}"),
            ));
        }
        let pad = params.padding;
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "padded input {}x{} smaller than kernel {kh}x{kw}",
                    h + 2 * pad,
                    w + 2 * pad
                ),
            ));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride: params.stride,
            pad,
            ho: (h + 2 * pad - kh) / params.stride + 1,
            wo: (w + 2 * pad - kw) / params.stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1, stride-1, unpadded convolution reads the input directly.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// The `[k x p]` column matrix of one sample.
    fn lower(&self, image: &[f32], col: &mut [f64]) {
        if self.is_pointwise() {
            widen_into(image, col);
        } else {
            self.im2col(image, col);
        }
    }

    fn im2col(&self, image: &[f32], col: &mut [f64]) {
        let p = self.p();
        for c in 0..self.cin {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let out = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *o = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                f64::from(src[ix as usize])
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], image: &mut [f64]) {
        let p = self.p();
        for c in 0..self.cin {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

fn widen_into(v: &[f32], out: &mut [f64]) {
    for (o, &x) in out.iter_mut().zip(v) {
        *o = f64::from(x);
    }
}

fn narrow(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn narrow_into(v: &[f64], out: &mut [f32]) {
    for (o, &x) in out.iter_mut().zip(v) {
        *o = x as f32;
    }
}

/// Row-major `c[m x n] = a[m x k] * b[k x n] + beta * c` in `f64`, with
/// arbitrary element strides for `a` and `b` so transposes cost nothing.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(
        (m - 1) * rsa + (k - 1) * csa < a.len(),
        "gemm: lhs out of bounds"
    );
    assert!(
        (k - 1) * rsb + (n - 1) * csb < b.len(),
        "gemm: rhs out of bounds"
    );
    // SAFETY: the asserts above bound every index dgemm touches in `a`, `b`
    // and `c`; the slices are distinct borrows so they cannot alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D cross-correlation with zero padding: `out[n, co, y, x] =
/// bias[co] + sum_{ci, i, j} weight[co, ci, i, j] * in[n, ci, y*s + i - p, x*s + j - p]`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    params: Conv2dParams,
) -> Result<Tensor> {
    let g = ConvGeom::resolve(input, weight, params)?;
    if bias.len() != g.cout {
        return Err(Error::shape(
            "conv2d",
            format!(
                "bias has {} values for {} output channels",
                bias.len(),
                g.cout
            ),
        ));
    }
    let (k, p) = (g.k(), g.p());
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * p;
    let w64 = widen(weight.data());
    let mut out = vec![0.0f32; g.n * out_stride];
    let mut col = vec![0.0f64; k * p];
    let mut acc = vec![0.0f64; out_stride];
    for s in 0..g.n {
        let image = &input.data()[s * in_stride..(s + 1) * in_stride];
        g.lower(image, &mut col);
        for (co, plane) in acc.chunks_exact_mut(p).enumerate() {
            plane.fill(f64::from(bias.data()[co]));
        }
        gemm(g.cout, k, p, &w64, (k, 1), &col, (p, 1), 1.0, &mut acc);
        narrow_into(&acc, &mut out[s * out_stride..(s + 1) * out_stride]);
    }
    Tensor::new(vec![g.n, g.cout, g.ho, g.wo], out)
}

pub struct Conv2dGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradients of [`conv2d`] given the upstream gradient `grad_out`.
/// The input gradient is only formed when `want_input` is set.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    params: Conv2dParams,
    want_input: bool,
) -> Result<Conv2dGrads> {
    let g = ConvGeom::resolve(input, weight, params)?;
    if grad_out.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d backward",
            format!(
                "upstream gradient {:?} does not match output",
                grad_out.shape()
            ),
        ));
    }
    let (k, p) = (g.k(), g.p());
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * p;
    let w64 = widen(weight.data());
    let mut grad_w = vec![0.0f64; g.cout * k];
    let mut grad_b = vec![0.0f64; g.cout];
    let mut grad_in = want_input.then(|| vec![0.0f32; input.len()]);
    let mut col = vec![0.0f64; k * p];
    let mut go = vec![0.0f64; out_stride];
    let (mut grad_col, mut grad_image) = if want_input {
        (vec![0.0f64; k * p], vec![0.0f64; in_stride])
    } else {
        (Vec::new(), Vec::new())
    };

    for s in 0..g.n {
        let image = &input.data()[s * in_stride..(s + 1) * in_stride];
        widen_into(
            &grad_out.data()[s * out_stride..(s + 1) * out_stride],
            &mut go,
        );
        for (co, plane) in go.chunks_exact(p).enumerate() {
            grad_b[co] += plane.iter().sum::<f64>();
        }
        g.lower(image, &mut col);
        // dW[cout x k] += dOut[cout x p] * cols^T[p x k]
        gemm(g.cout, p, k, &go, (p, 1), &col, (1, p), 1.0, &mut grad_w);

        if let Some(gi) = grad_in.as_mut() {
            // dCols[k x p] = W^T[k x cout] * dOut[cout x p]
            gemm(k, g.cout, p, &w64, (1, k), &go, (p, 1), 0.0, &mut grad_col);
            if g.is_pointwise() {
                grad_image.copy_from_slice(&grad_col);
            } else {
                grad_image.fill(0.0);
                g.col2im(&grad_col, &mut grad_image);
            }
            narrow_into(&grad_image, &mut gi[s * in_stride..(s + 1) * in_stride]);
        }
    }

    Ok(Conv2dGrads {
        input: grad_in
            .map(|v| Tensor::new(input.shape().to_vec(), v))
            .transpose()?,
        weight: Tensor::new(weight.shape().to_vec(), narrow(&grad_w))?,
        bias: Tensor::new(vec![g.cout], narrow(&grad_b))?,
    })
}

/// Output of [`maxpool2d`]: pooled values plus, for every output element,
/// the flat index of the input element that produced it.
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

/// Max pooling over `size x size` windows. Output extent is
/// `(H - size) / stride + 1` (floor), so trailing rows/columns that do not
/// fill a window are dropped. Ties resolve to the first maximum in
/// row-major window order.
pub fn maxpool2d(input: &Tensor, size: usize, stride: usize) -> Result<Pooled> {
    let [n, c, h, w] = input.dims4("maxpool2d")?;
    if size == 0 || stride == 0 {
        return Err(Error::invalid(
            "maxpool2d",
            format!("size {size} and stride {stride} must be at least 1"),
        ));
    }
    if h < size || w < size {
        return Err(Error::shape(
            "maxpool2d",
            format!("input {h}x{w} smaller than window {size}x{size}"),
        ));
    }
    let (ho, wo) = ((h - size) / stride + 1, (w - size) / stride + 1);
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = src[best_idx];
                for i in 0..size {
                    let row = base + (oy * stride + i) * w + ox * stride;
                    for j in 0..size {
                        if src[row + j] > best {
                            best = src[row + j];
                            best_idx = row + j;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(vec![n, c, ho, wo], out)?,
        argmax,
    })
}

/// Routes each upstream gradient to the input position that won its window.
pub fn maxpool2d_backward(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor,
) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape(
            "maxpool2d backward",
            format!(
                "{} argmax entries for {} gradients",
                argmax.len(),
                grad_out.len()
            ),
        ));
    }
    let mut grad = Tensor::zeros(input_shape);
    let dst = grad.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        dst[idx] += g;
    }
    Ok(grad)
}

/// Nearest-neighbour upsampling: each pixel becomes a `factor x factor` block.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4("upsample_nearest")?;
    if factor == 0 {
        return Err(Error::invalid("upsample factor", "must be at least 1"));
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in input.data().chunks_exact(h * w) {
        for y in 0..ho {
            let row = &plane[(y / factor) * w..(y / factor + 1) * w];
            for x in 0..wo {
                out.push(row[x / factor]);
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// Sums the upstream gradient over each replicated block.
pub fn upsample_nearest_backward(grad_out: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, ho, wo] = grad_out.dims4("upsample_nearest backward")?;
    if factor == 0 || ho % factor != 0 || wo % factor != 0 {
        return Err(Error::shape(
            "upsample_nearest backward",
            format!("{ho}x{wo} is not a multiple of factor {factor}"),
        ));
    }
    let (h, w) = (ho / factor, wo / factor);
    let mut grad = vec![0.0f32; n * c * h * w];
    for (plane, dst) in grad_out
        .data()
        .chunks_exact(ho * wo)
        .zip(grad.chunks_exact_mut(h * w))
    {
        for y in 0..ho {
            for x in 0..wo {
                dst[(y / factor) * w + x / factor] += plane[y * wo + x];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], grad)
}

/// Channel-wise concatenation: the channels of `a` followed by those of `b`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [na, ca, ha, wa] = a.dims4("concat_channels")?;
    let [nb, cb, hb, wb] = b.dims4("concat_channels")?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!(
                "cannot join {:?} and {:?}: batch and spatial dims differ",
                a.shape(),
                b.shape()
            ),
        ));
    }
    let (sa, sb) = (ca * ha * wa, cb * hb * wb);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for s in 0..na {
        out.extend_from_slice(&a.data()[s * sa..(s + 1) * sa]);
        out.extend_from_slice(&b.data()[s * sb..(s + 1) * sb]);
    }
    Tensor::new(vec![na, ca + cb, ha, wa], out)
}

/// Splits a concatenated gradient back at channel `split`.
pub fn concat_channels_backward(grad_out: &Tensor, split: usize) -> Result<(Tensor, Tensor)> {
    let [n, c, h, w] = grad_out.dims4("concat_channels backward")?;
    if split > c {
        return Err(Error::shape(
            "concat_channels backward",
            format!("split {split} beyond {c} channels"),
        ));
    }
    let (sa, sb) = (split * h * w, (c - split) * h * w);
    let mut ga = Vec::with_capacity(n * sa);
    let mut gb = Vec::with_capacity(n * sb);
    for chunk in grad_out.data().chunks_exact(sa + sb) {
        ga.extend_from_slice(&chunk[..sa]);
        gb.extend_from_slice(&chunk[sa..]);
    }
    Ok((
        Tensor::new(vec![n, split, h, w], ga)?,
        Tensor::new(vec![n, c - split, h, w], gb)?,
    ))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("relu backward preserves shape")
}

/// Mean squared error, accumulated in `f64`.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "mse",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.is_empty() {
        return Err(Error::invalid("mse", "empty tensors"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}
