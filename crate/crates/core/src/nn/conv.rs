use super::{NnError, Scalar, Tensor};

/// Kernel, bias, stride and zero-padding of a 2-D convolution.
///
/// `kernel` is laid out `(out_ch, in_ch, kH, kW)` from the convolution's
/// point of view. The same spec drives [`deconv2d`], which maps the
/// `out_ch` side back to the `in_ch` side. `bias` has one entry per channel
/// the operation produces: `out_ch` for [`conv2d`], `in_ch` for [`deconv2d`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec<T = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    out_ch: usize,
    in_ch: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(
        kernel: Tensor<T>,
        bias: Tensor<T>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self, NnError> {
        let spec = Self {
            kernel,
            bias,
            stride,
            padding,
        };
        spec.geometry()?;
        Ok(spec)
    }

    /// Zero bias sized for forward convolution.
    pub fn without_bias(kernel: Tensor<T>, stride: (usize, usize), padding: (usize, usize)) -> Result<Self, NnError> {
        let out_ch = kernel.shape().first().copied().unwrap_or(0);
        Self::new(kernel, Tensor::zeros(&[out_ch]), stride, padding)
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    fn geometry(&self) -> Result<Geometry, NnError> {
        let ks = self.kernel.shape();
        if ks.len() != 4 || ks.contains(&0) {
            return Err(NnError::InvalidConfig(format!(
                "kernel must have four positive extents, got {ks:?}"
            )));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(NnError::InvalidConfig("stride must be >= 1".into()));
        }
        Ok(Geometry {
            out_ch: ks[0],
            in_ch: ks[1],
            kh: ks[2],
            kw: ks[3],
            sh: self.stride.0,
            sw: self.stride.1,
            ph: self.padding.0,
            pw: self.padding.1,
        })
    }
}

fn chw(t: &Tensor<impl Scalar>, what: &str) -> Result<(usize, usize, usize), NnError> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(NnError::ShapeMismatch(format!(
            "{what} must be (channels, height, width), got {s:?}"
        ))),
    }
}

fn out_extent(input: usize, pad: usize, k: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

/// Output `(height, width)` of a convolution, or an error when the kernel
/// does not fit the padded input.
pub fn conv2d_output_hw<T: Scalar>(spec: &ConvSpec<T>, input_hw: (usize, usize)) -> Result<(usize, usize), NnError> {
    let g = spec.geometry()?;
    match (
        out_extent(input_hw.0, g.ph, g.kh, g.sh),
        out_extent(input_hw.1, g.pw, g.kw, g.sw),
    ) {
        (Some(h), Some(w)) => Ok((h, w)),
        _ => Err(NnError::ShapeMismatch(format!(
            "kernel {}x{} does not fit input {:?} with padding {:?}",
            g.kh, g.kw, input_hw, spec.padding
        ))),
    }
}

/// Smallest output `(height, width)` of a deconvolution whose mirrored
/// convolution maps back to `input_hw`.
pub fn deconv2d_output_hw<T: Scalar>(spec: &ConvSpec<T>, input_hw: (usize, usize)) -> Result<(usize, usize), NnError> {
    let g = spec.geometry()?;
    let extent = |n: usize, s: usize, k: usize, p: usize| -> Option<usize> {
        let full = (n.checked_sub(1)?) * s + k;
        full.checked_sub(2 * p).filter(|&e| e > 0)
    };
    match (
        extent(input_hw.0, g.sh, g.kh, g.ph),
        extent(input_hw.1, g.sw, g.kw, g.pw),
    ) {
        (Some(h), Some(w)) => Ok((h, w)),
        _ => Err(NnError::ShapeMismatch(format!(
            "deconvolution of {input_hw:?} with kernel {}x{} and padding {:?} is empty",
            g.kh, g.kw, spec.padding
        ))),
    }
}

/// Inclusive-exclusive range of output columns `x` whose input column
/// `x*s + k - p` lands inside `[0, n)`.
#[inline]
fn valid_range(out: usize, n: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    if n + p <= k {
        return (0, 0);
    }
    let hi = ((n - 1 + p - k) / s + 1).min(out);
    (lo.min(hi), hi)
}

/// Unrolls `input` into the `(in_ch·kH·kW) × (oH·oW)` patch matrix, zeros
/// where the receptive field falls into padding.
fn im2col<T: Scalar>(input: &[T], (h, w): (usize, usize), g: &Geometry, (oh, ow): (usize, usize)) -> Vec<T> {
    let (x_ranges, y_ranges) = ranges(g, (h, w), (oh, ow));
    let p = oh * ow;
    let mut col = vec![T::zero(); g.in_ch * g.kh * g.kw * p];
    for c in 0..g.in_ch {
        let in_plane = &input[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kh {
            let (ylo, yhi) = y_ranges[ki];
            for kj in 0..g.kw {
                let (xlo, xhi) = x_ranges[kj];
                let row = &mut col[((c * g.kh + ki) * g.kw + kj) * p..][..p];
                for y in ylo..yhi {
                    let iy = y * g.sh + ki - g.ph;
                    let in_row = &in_plane[iy * w..(iy + 1) * w];
                    let dst = &mut row[y * ow + xlo..y * ow + xhi];
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d = in_row[(xlo + i) * g.sw + kj - g.pw];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch-matrix entries back onto `out`.
fn col2im_add<T: Scalar>(col: &[T], g: &Geometry, (h, w): (usize, usize), (oh, ow): (usize, usize), out: &mut [T]) {
    let (x_ranges, y_ranges) = ranges(g, (h, w), (oh, ow));
    let p = oh * ow;
    for c in 0..g.in_ch {
        let out_plane = &mut out[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kh {
            let (ylo, yhi) = y_ranges[ki];
            for kj in 0..g.kw {
                let (xlo, xhi) = x_ranges[kj];
                let row = &col[((c * g.kh + ki) * g.kw + kj) * p..][..p];
                for y in ylo..yhi {
                    let iy = y * g.sh + ki - g.ph;
                    let out_row = &mut out_plane[iy * w..(iy + 1) * w];
                    let src = &row[y * ow + xlo..y * ow + xhi];
                    for (i, &v) in src.iter().enumerate() {
                        out_row[(xlo + i) * g.sw + kj - g.pw] += v;
                    }
                }
            }
        }
    }
}

/// `out += M(kernel) · input`, no bias.
fn conv_forward_raw<T: Scalar>(
    input: &[T],
    (h, w): (usize, usize),
    kernel: &[T],
    g: &Geometry,
    (oh, ow): (usize, usize),
    out: &mut [T],
) {
    let col = im2col(input, (h, w), g, (oh, ow));
    let r = g.in_ch * g.kh * g.kw;
    // (oc × r) · (r × p)
    gemm_acc(g.out_ch, r, oh * ow, kernel, false, &col, false, out);
}

/// `grad_in += Mᵀ(kernel) · upstream`.
fn conv_backward_input_raw<T: Scalar>(
    upstream: &[T],
    (oh, ow): (usize, usize),
    kernel: &[T],
    g: &Geometry,
    (h, w): (usize, usize),
    grad_in: &mut [T],
) {
    let r = g.in_ch * g.kh * g.kw;
    let p = oh * ow;
    let mut col = vec![T::zero(); r * p];
    // (r × oc) · (oc × p)
    gemm_acc(r, g.out_ch, p, kernel, true, upstream, false, &mut col);
    col2im_add(&col, g, (h, w), (oh, ow), grad_in);
}

/// `grad_kernel[o,c,ki,kj] += Σ upstream[o,y,x] · input[c, y*s+ki-p, x*s+kj-p]`.
fn conv_backward_kernel_raw<T: Scalar>(
    upstream: &[T],
    (oh, ow): (usize, usize),
    input: &[T],
    (h, w): (usize, usize),
    g: &Geometry,
    grad_kernel: &mut [T],
) {
    let col = im2col(input, (h, w), g, (oh, ow));
    let r = g.in_ch * g.kh * g.kw;
    // (oc × p) · (p × r)
    gemm_acc(g.out_ch, oh * ow, r, upstream, false, &col, true, grad_kernel);
}

/// `c += op(a) · op(b)` for row-major `a` (`m × k`, or `k × m` when
/// transposed), `b` (`k × n`, or `n × k`) and `c` (`m × n`).
#[allow(clippy::too_many_arguments)]
fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], a_t: bool, b: &[T], b_t: bool, c: &mut [T]) {
    assert!(
        a.len() >= m * k && b.len() >= k * n && c.len() >= m * n,
        "gemm operand sizes"
    );
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    T::gemm_acc(m, k, n, a, [rsa, csa], b, [rsb, csb], c, [n, 1]);
}

type Ranges = Vec<(usize, usize)>;

fn ranges(g: &Geometry, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> (Ranges, Ranges) {
    let xr = (0..g.kw).map(|kj| valid_range(ow, w, g.sw, kj, g.pw)).collect();
    let yr = (0..g.kh).map(|ki| valid_range(oh, h, g.sh, ki, g.ph)).collect();
    (xr, yr)
}

/// Forward convolution `b = M a + bias`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>, NnError> {
    let g = spec.geometry()?;
    let (c, h, w) = chw(input, "conv2d input")?;
    if c != g.in_ch {
        return Err(NnError::ShapeMismatch(format!(
            "conv2d input has {c} channels, kernel expects {}",
            g.in_ch
        )));
    }
    if spec.bias.len() != g.out_ch {
        return Err(NnError::ShapeMismatch(format!(
            "conv2d bias has {} entries, expected {}",
            spec.bias.len(),
            g.out_ch
        )));
    }
    input.ensure_finite("conv2d input")?;
    let (oh, ow) = conv2d_output_hw(spec, (h, w))?;
    let mut out = vec![T::zero(); g.out_ch * oh * ow];
    for (o, plane) in out.chunks_mut(oh * ow).enumerate() {
        plane.fill(spec.bias.data()[o]);
    }
    conv_forward_raw(input.data(), (h, w), spec.kernel.data(), &g, (oh, ow), &mut out);
    Tensor::from_vec(&[g.out_ch, oh, ow], out)
}

/// Gradients of [`conv2d`]: `grad_input = Mᵀ upstream`, plus the exact
/// kernel and bias partials of the same linear map.
pub fn conv2d_grad<T: Scalar>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    spec: &ConvSpec<T>,
) -> Result<ConvGrads<T>, NnError> {
    let g = spec.geometry()?;
    let (c, h, w) = chw(input, "conv2d_grad input")?;
    if c != g.in_ch {
        return Err(NnError::ShapeMismatch(format!(
            "conv2d_grad input has {c} channels, kernel expects {}",
            g.in_ch
        )));
    }
    let (oh, ow) = conv2d_output_hw(spec, (h, w))?;
    if upstream.shape() != [g.out_ch, oh, ow] {
        return Err(NnError::ShapeMismatch(format!(
            "conv2d_grad upstream {:?}, forward output is {:?}",
            upstream.shape(),
            [g.out_ch, oh, ow]
        )));
    }
    let mut grad_in = vec![T::zero(); c * h * w];
    conv_backward_input_raw(upstream.data(), (oh, ow), spec.kernel.data(), &g, (h, w), &mut grad_in);
    let mut grad_k = vec![T::zero(); spec.kernel.len()];
    conv_backward_kernel_raw(upstream.data(), (oh, ow), input.data(), (h, w), &g, &mut grad_k);
    let grad_b: Vec<T> = upstream
        .data()
        .chunks(oh * ow)
        .map(|p| p.iter().copied().sum())
        .collect();
    Ok(ConvGrads {
        input: Tensor::from_vec(&[c, h, w], grad_in)?,
        kernel: Tensor::from_vec(spec.kernel.shape(), grad_k)?,
        bias: Tensor::from_vec(&[g.out_ch], grad_b)?,
    })
}

/// Deconvolution `a = M̃ b + bias` with the default output extent
/// `(n - 1)·s + k - 2p`.
pub fn deconv2d<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>, NnError> {
    let (_, h, w) = chw(input, "deconv2d input")?;
    let hw = deconv2d_output_hw(spec, (h, w))?;
    deconv2d_to(input, spec, hw)
}

/// Deconvolution to an explicit output extent. The extent must be one the
/// mirrored convolution maps back onto `input`'s extent; with stride > 1
/// several extents qualify and this picks between them.
pub fn deconv2d_to<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec<T>,
    output_hw: (usize, usize),
) -> Result<Tensor<T>, NnError> {
    let g = spec.geometry()?;
    let (c, oh, ow) = chw(input, "deconv2d input")?;
    if c != g.out_ch {
        return Err(NnError::ShapeMismatch(format!(
            "deconv2d input has {c} channels, kernel expects {}",
            g.out_ch
        )));
    }
    if spec.bias.len() != g.in_ch {
        return Err(NnError::ShapeMismatch(format!(
            "deconv2d bias has {} entries, expected {}",
            spec.bias.len(),
            g.in_ch
        )));
    }
    if conv2d_output_hw(spec, output_hw)? != (oh, ow) {
        return Err(NnError::ShapeMismatch(format!(
            "deconv2d output {output_hw:?} does not convolve back to {:?}",
            (oh, ow)
        )));
    }
    input.ensure_finite("deconv2d input")?;
    let (h, w) = output_hw;
    let mut out = vec![T::zero(); g.in_ch * h * w];
    for (ch, plane) in out.chunks_mut(h * w).enumerate() {
        plane.fill(spec.bias.data()[ch]);
    }
    conv_backward_input_raw(input.data(), (oh, ow), spec.kernel.data(), &g, (h, w), &mut out);
    Tensor::from_vec(&[g.in_ch, h, w], out)
}

/// Gradients of [`deconv2d`]: `grad_input = M̃ᵀ upstream`, plus kernel and
/// bias partials.
pub fn deconv2d_grad<T: Scalar>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    spec: &ConvSpec<T>,
) -> Result<ConvGrads<T>, NnError> {
    let g = spec.geometry()?;
    let (c, oh, ow) = chw(input, "deconv2d_grad input")?;
    let (uc, h, w) = chw(upstream, "deconv2d_grad upstream")?;
    if c != g.out_ch || uc != g.in_ch {
        return Err(NnError::ShapeMismatch(format!(
            "deconv2d_grad channels ({c}, {uc}) do not match kernel {:?}",
            spec.kernel.shape()
        )));
    }
    if conv2d_output_hw(spec, (h, w))? != (oh, ow) {
        return Err(NnError::ShapeMismatch(format!(
            "deconv2d_grad upstream {:?} is not a valid output for input {:?}",
            upstream.shape(),
            input.shape()
        )));
    }
    let mut grad_in = vec![T::zero(); c * oh * ow];
    conv_forward_raw(upstream.data(), (h, w), spec.kernel.data(), &g, (oh, ow), &mut grad_in);
    let mut grad_k = vec![T::zero(); spec.kernel.len()];
    conv_backward_kernel_raw(input.data(), (oh, ow), upstream.data(), (h, w), &g, &mut grad_k);
    let grad_b: Vec<T> = upstream.data().chunks(h * w).map(|p| p.iter().copied().sum()).collect();
    Ok(ConvGrads {
        input: Tensor::from_vec(&[c, oh, ow], grad_in)?,
        kernel: Tensor::from_vec(spec.kernel.shape(), grad_k)?,
        bias: Tensor::from_vec(&[g.in_ch], grad_b)?,
    })
}

/// Accumulates kernel and bias partials of [`conv2d`] into `grad_kernel` /
/// `grad_bias` and returns `Mᵀ upstream` when `need_input` is set.
pub(crate) fn conv2d_backward_accumulate<T: Scalar>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    spec: &ConvSpec<T>,
    grad_kernel: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
    need_input: bool,
) -> Result<Option<Tensor<T>>, NnError> {
    let g = spec.geometry()?;
    let (c, h, w) = chw(input, "conv2d input")?;
    let (oh, ow) = conv2d_output_hw(spec, (h, w))?;
    if c != g.in_ch || upstream.shape() != [g.out_ch, oh, ow] {
        return Err(NnError::ShapeMismatch(format!(
            "conv backward: input {:?}, upstream {:?}, kernel {:?}",
            input.shape(),
            upstream.shape(),
            spec.kernel.shape()
        )));
    }
    conv_backward_kernel_raw(
        upstream.data(),
        (oh, ow),
        input.data(),
        (h, w),
        &g,
        grad_kernel.data_mut(),
    );
    for (b, plane) in grad_bias.data_mut().iter_mut().zip(upstream.data().chunks(oh * ow)) {
        *b += plane.iter().copied().sum::<T>();
    }
    if !need_input {
        return Ok(None);
    }
    let mut grad_in = vec![T::zero(); c * h * w];
    conv_backward_input_raw(upstream.data(), (oh, ow), spec.kernel.data(), &g, (h, w), &mut grad_in);
    Ok(Some(Tensor::from_vec(&[c, h, w], grad_in)?))
}

/// Deconvolution counterpart of [`conv2d_backward_accumulate`]; returns
/// `M̃ᵀ upstream` when `need_input` is set.
pub(crate) fn deconv2d_backward_accumulate<T: Scalar>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    spec: &ConvSpec<T>,
    grad_kernel: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
    need_input: bool,
) -> Result<Option<Tensor<T>>, NnError> {
    let g = spec.geometry()?;
    let (c, oh, ow) = chw(input, "deconv2d input")?;
    let (uc, h, w) = chw(upstream, "deconv2d upstream")?;
    if c != g.out_ch || uc != g.in_ch || conv2d_output_hw(spec, (h, w))? != (oh, ow) {
        return Err(NnError::ShapeMismatch(format!(
            "deconv backward: input {:?}, upstream {:?}, kernel {:?}",
            input.shape(),
            upstream.shape(),
            spec.kernel.shape()
        )));
    }
    conv_backward_kernel_raw(
        input.data(),
        (oh, ow),
        upstream.data(),
        (h, w),
        &g,
        grad_kernel.data_mut(),
    );
    for (b, plane) in grad_bias.data_mut().iter_mut().zip(upstream.data().chunks(h * w)) {
        *b += plane.iter().copied().sum::<T>();
    }
    if !need_input {
        return Ok(None);
    }
    let mut grad_in = vec![T::zero(); c * oh * ow];
    conv_forward_raw(upstream.data(), (h, w), spec.kernel.data(), &g, (oh, ow), &mut grad_in);
    Ok(Some(Tensor::from_vec(&[c, oh, ow], grad_in)?))
}

/// Dense convolution matrix `M` for a single-channel spec over an
/// `(1, H, W)` input: row `r = y·OW + x`, column `c = iy·W + ix` holds
/// `w[ki][kj]` when output `(y, x)` reads input `(iy, ix)`. Bias is not part
/// of `M`.
pub fn build_conv_matrix<T: Scalar>(spec: &ConvSpec<T>, input_shape: &[usize]) -> Result<Tensor<T>, NnError> {
    let g = spec.geometry()?;
    if g.in_ch != 1 || g.out_ch != 1 {
        return Err(NnError::InvalidConfig(format!(
            "convolution matrix is built for single-channel kernels only, got {:?}",
            spec.kernel.shape()
        )));
    }
    let (h, w) = match *input_shape {
        [1, h, w] | [h, w] => (h, w),
        ref s => {
            return Err(NnError::ShapeMismatch(format!(
                "expected a single-channel input shape, got {s:?}"
            )))
        }
    };
    let (oh, ow) = conv2d_output_hw(spec, (h, w))?;
    let mut m = Tensor::zeros(&[oh * ow, h * w]);
    let cols = h * w;
    let k = spec.kernel.data();
    for y in 0..oh {
        for x in 0..ow {
            let row = y * ow + x;
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let iy = (y * g.sh + ki) as isize - g.ph as isize;
                    let ix = (x * g.sw + kj) as isize - g.pw as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    let col = iy as usize * w + ix as usize;
                    m.data_mut()[row * cols + col] = k[ki * g.kw + kj];
                }
            }
        }
    }
    Ok(m)
}
