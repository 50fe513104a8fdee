//! Dense 4-D feature maps and the primitive kernels (forward and adjoint)
//! evaluated by graph nodes.
//!
//! Layout is row-major NCHW in `f64`. Every kernel is a pure function of its
//! arguments.

use crate::data::RngStream;
use crate::error::{Error, Result};

/// Label value excluded from the loss and from metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Dense `n × c × h × w` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self::filled(n, c, h, w, 0.0)
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, value: f64) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![value; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "tensor extents must be positive, got {n}x{c}x{h}x{w}"
            )));
        }
        if data.len() != n * c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match {n}x{c}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn same_dims(&self, other: &Tensor4) -> bool {
        self.dims() == other.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = value;
    }

    /// One `h × w` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let len = self.h * self.w;
        let start = (n * self.c + c) * len;
        &self.data[start..start + len]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let len = self.h * self.w;
        let start = (n * self.c + c) * len;
        &mut self.data[start..start + len]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn scale(&self, factor: f64) -> Tensor4 {
        self.map(|v| v * factor)
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        if !self.same_dims(other) {
            return Err(Error::ShapeMismatch(format!(
                "cannot add {:?} into {:?}",
                other.dims(),
                self.dims()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies sample `i` out as an `n = 1` tensor.
    pub fn sample(&self, i: usize) -> Tensor4 {
        let len = self.c * self.h * self.w;
        Tensor4 {
            n: 1,
            data: self.data[i * len..(i + 1) * len].to_vec(),
            ..*self
        }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(parts: &[&Tensor4]) -> Result<Tensor4> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in parts {
            if (t.c, t.h, t.w) != (first.c, first.h, first.w) {
                return Err(Error::ShapeMismatch(format!(
                    "cannot stack {:?} with {:?}",
                    t.dims(),
                    first.dims()
                )));
            }
            n += t.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor4 {
            n,
            c: first.c,
            h: first.h,
            w: first.w,
            data,
        })
    }
}

/// Per-pixel class labels, `IGNORE_LABEL` marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != n * h * w {
            return Err(Error::ShapeMismatch(format!(
                "label length {} does not match {n}x{h}x{w}",
                labels.len()
            )));
        }
        Ok(Self { n, h, w, labels })
    }

    pub fn filled(n: usize, h: usize, w: usize, label: u8) -> Self {
        Self {
            n,
            h,
            w,
            labels: vec![label; n * h * w],
        }
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn at(&self, n: usize, y: usize, x: usize) -> u8 {
        self.labels[(n * self.h + y) * self.w + x]
    }

    /// Checks every entry is a class below `num_classes` or the ignore label.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= num_classes)
        {
            Some(bad) => Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {num_classes}) and not {IGNORE_LABEL}"
            ))),
            None => Ok(()),
        }
    }

    pub fn sample(&self, i: usize) -> LabelMap {
        let len = self.h * self.w;
        LabelMap {
            n: 1,
            h: self.h,
            w: self.w,
            labels: self.labels[i * len..(i + 1) * len].to_vec(),
        }
    }

    pub fn stack(parts: &[&LabelMap]) -> Result<LabelMap> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero label maps".into()))?;
        let mut labels = Vec::new();
        let mut n = 0;
        for p in parts {
            if (p.h, p.w) != (first.h, first.w) {
                return Err(Error::ShapeMismatch("label maps differ in extent".into()));
            }
            n += p.n;
            labels.extend_from_slice(&p.labels);
        }
        Ok(LabelMap {
            n,
            h: first.h,
            w: first.w,
            labels,
        })
    }
}

/// Weights and bias of a convolution (or of a per-channel upsampler).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            weights: vec![0.0; out_channels * in_channels * kernel_h * kernel_w],
            bias: vec![0.0; out_channels],
        }
    }

    /// Same-padded (`pad = k / 2`) stride-1 square convolution.
    pub fn same(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        Self::zeros(out_channels, in_channels, kernel, kernel, 1, kernel / 2)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.out_channels * self.in_channels * self.kernel_h * self.kernel_w;
        if self.weights.len() != expected || self.bias.len() != self.out_channels {
            return Err(Error::ShapeMismatch(format!(
                "conv params declare {}x{}x{}x{} but hold {} weights / {} biases",
                self.out_channels,
                self.in_channels,
                self.kernel_h,
                self.kernel_w,
                self.weights.len(),
                self.bias.len()
            )));
        }
        if self.stride == 0 {
            return Err(Error::ShapeMismatch("stride must be positive".into()));
        }
        Ok(())
    }

    pub fn scalar_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    #[inline]
    fn weight_index(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> usize {
        ((oc * self.in_channels + ic) * self.kernel_h + ky) * self.kernel_w + kx
    }

    /// Spatial output extents for an `h × w` input.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w || self.stride == 0 {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} kernel does not fit a {h}x{w} input with padding {}",
                self.kernel_h, self.kernel_w, self.padding
            )));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }
}

/// Valid output columns `[lo, hi)` for kernel tap `k` so that the input column
/// `o * stride + k - pad` lies inside `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride + k >= pad  and  o*stride + k - pad < in_len
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let limit = in_len + pad; // exclusive bound on o*stride + k
    let hi = if limit > k {
        ((limit - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Cross-correlation plus bias.
pub fn conv2d(input: &Tensor4, params: &ConvParams) -> Result<Tensor4> {
    params.validate()?;
    if input.c != params.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "conv2d expects {} input channels, got {}",
            params.in_channels, input.c
        )));
    }
    let (oh, ow) = params.output_extent(input.h, input.w)?;
    let mut out = Tensor4::zeros(input.n, params.out_channels, oh, ow);
    let (s, p) = (params.stride, params.padding);
    for n in 0..input.n {
        for oc in 0..params.out_channels {
            let plane = out.plane_mut(n, oc);
            plane.fill(params.bias[oc]);
            for ic in 0..params.in_channels {
                let src = input.plane(n, ic);
                for ky in 0..params.kernel_h {
                    let (y0, y1) = valid_range(oh, input.h, ky, s, p);
                    for kx in 0..params.kernel_w {
                        let wv = params.weights[params.weight_index(oc, ic, ky, kx)];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_range(ow, input.w, kx, s, p);
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            let dst = &mut plane[oy * ow + x0..oy * ow + x1];
                            let row = &src[iy * input.w..(iy + 1) * input.w];
                            if s == 1 {
                                let row = &row[x0 + kx - p..x1 + kx - p];
                                for (d, &v) in dst.iter_mut().zip(row) {
                                    *d += wv * v;
                                }
                            } else {
                                for (j, d) in dst.iter_mut().enumerate() {
                                    *d += wv * row[(x0 + j) * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input and parameters.
pub struct ConvGrads {
    pub input: Option<Tensor4>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Adjoint of [`conv2d`]. `want_input` skips the input gradient when the
/// caller has no use for it.
pub fn conv2d_grad(
    input: &Tensor4,
    params: &ConvParams,
    grad_out: &Tensor4,
    want_input: bool,
) -> Result<ConvGrads> {
    params.validate()?;
    if input.c != params.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "conv2d_grad expects {} input channels, got {}",
            params.in_channels, input.c
        )));
    }
    let (oh, ow) = params.output_extent(input.h, input.w)?;
    if grad_out.dims() != [input.n, params.out_channels, oh, ow] {
        return Err(Error::ShapeMismatch(format!(
            "grad_out {:?} does not match conv output {:?}",
            grad_out.dims(),
            [input.n, params.out_channels, oh, ow]
        )));
    }
    let (s, p) = (params.stride, params.padding);
    let mut gw = vec![0.0; params.weights.len()];
    let mut gb = vec![0.0; params.out_channels];
    let mut gin = want_input.then(|| Tensor4::zeros(input.n, input.c, input.h, input.w));
    for n in 0..input.n {
        for oc in 0..params.out_channels {
            let g = grad_out.plane(n, oc);
            gb[oc] += g.iter().sum::<f64>();
            for ic in 0..params.in_channels {
                let src = input.plane(n, ic);
                for ky in 0..params.kernel_h {
                    let (y0, y1) = valid_range(oh, input.h, ky, s, p);
                    for kx in 0..params.kernel_w {
                        let wi = params.weight_index(oc, ic, ky, kx);
                        let wv = params.weights[wi];
                        let (x0, x1) = valid_range(ow, input.w, kx, s, p);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            let grow = &g[oy * ow + x0..oy * ow + x1];
                            if s == 1 {
                                let lo = iy * input.w + x0 + kx - p;
                                let row = &src[lo..lo + (x1 - x0)];
                                acc += grow.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                                if let Some(gin) = gin.as_mut() {
                                    if wv != 0.0 {
                                        let dst = &mut gin.plane_mut(n, ic)[lo..lo + (x1 - x0)];
                                        for (d, &gv) in dst.iter_mut().zip(grow) {
                                            *d += wv * gv;
                                        }
                                    }
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    let ii = iy * input.w + (x0 + j) * s + kx - p;
                                    acc += gv * src[ii];
                                    if let Some(gin) = gin.as_mut() {
                                        gin.plane_mut(n, ic)[ii] += wv * gv;
                                    }
                                }
                            }
                        }
                        gw[wi] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gin,
        weights: gw,
        bias: gb,
    })
}

/// 2×2 / stride-2 max pooling. The returned map holds, per output element, the
/// flat index into `input` of the winning element. Ties resolve to the first
/// position in row-major window order.
pub fn maxpool2d(input: &Tensor4) -> Result<(Tensor4, Vec<u32>)> {
    if !input.h.is_multiple_of(2) || !input.w.is_multiple_of(2) {
        return Err(Error::ShapeMismatch(format!(
            "maxpool needs even extents, got {}x{}",
            input.h, input.w
        )));
    }
    let (oh, ow) = (input.h / 2, input.w / 2);
    let mut out = Tensor4::zeros(input.n, input.c, oh, ow);
    let mut argmax = Vec::with_capacity(out.len());
    let data = input.data();
    let mut k = 0;
    for n in 0..input.n {
        for c in 0..input.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = input.index(n, c, 2 * oy, 2 * ox);
                    let cands = [base, base + 1, base + input.w, base + input.w + 1];
                    let mut best = cands[0];
                    for &i in &cands[1..] {
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                    out.data[k] = data[best];
                    argmax.push(best as u32);
                    k += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each output gradient to its recorded winner.
pub fn maxpool2d_grad(input_dims: [usize; 4], argmax: &[u32], grad_out: &Tensor4) -> Result<Tensor4> {
    if argmax.len() != grad_out.len() {
        return Err(Error::ShapeMismatch(
            "argmax map does not match grad_out".into(),
        ));
    }
    let [n, c, h, w] = input_dims;
    let mut gin = Tensor4::zeros(n, c, h, w);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gin.data[i as usize] += g;
    }
    Ok(gin)
}

/// Kernel size and padding of the bilinear upsampler for `factor`.
pub fn upsample_geometry(factor: usize) -> (usize, usize) {
    if factor.is_multiple_of(2) {
        (2 * factor, factor / 2)
    } else {
        (2 * factor - 1, (factor - 1) / 2)
    }
}

/// 1-D bilinear interpolation stencil for `factor`.
pub fn bilinear_stencil(factor: usize) -> Vec<f64> {
    let (k, _) = upsample_geometry(factor);
    let f = factor as f64;
    let center = if k % 2 == 1 {
        f - 1.0
    } else {
        f - 0.5
    };
    (0..k)
        .map(|i| 1.0 - (i as f64 - center).abs() / f)
        .collect()
}

/// Per-channel upsampler parameters initialized to the bilinear stencil.
pub fn bilinear_upsample_params(channels: usize, factor: usize) -> ConvParams {
    let (k, pad) = upsample_geometry(factor);
    let stencil = bilinear_stencil(factor);
    let mut params = ConvParams::zeros(channels, 1, k, k, factor, pad);
    for c in 0..channels {
        for i in 0..k {
            for j in 0..k {
                params.weights[(c * k + i) * k + j] = stencil[i] * stencil[j];
            }
        }
    }
    params
}

/// For each output coordinate along one axis, the (tap, clamped input index)
/// pairs contributing to it.
fn upsample_taps(out_len: usize, in_len: usize, params_k: usize, factor: usize, pad: usize) -> Vec<Vec<(usize, usize)>> {
    (0..out_len)
        .map(|o| {
            let shifted = (o + pad) as i64;
            (0..params_k)
                .filter(|&t| (shifted - t as i64).rem_euclid(factor as i64) == 0)
                .map(|t| {
                    let i = (shifted - t as i64) / factor as i64;
                    (t, i.clamp(0, in_len as i64 - 1) as usize)
                })
                .collect()
        })
        .collect()
}

fn check_upsample(input: &Tensor4, params: &ConvParams) -> Result<()> {
    params.validate()?;
    let factor = params.stride;
    if factor < 2 {
        return Err(Error::ShapeMismatch(format!(
            "upsample factor must be at least 2, got {factor}"
        )));
    }
    if params.in_channels != 1 || params.out_channels != input.c {
        return Err(Error::ShapeMismatch(format!(
            "per-channel upsampler for {} channels applied to {} channels",
            params.out_channels, input.c
        )));
    }
    Ok(())
}

/// Learnable per-channel transposed convolution with stride `params.stride`.
/// Input reads beyond the border are clamped to the edge, so a stencil whose
/// phases each sum to one reproduces constant fields exactly, borders included.
pub fn upsample(input: &Tensor4, params: &ConvParams) -> Result<Tensor4> {
    check_upsample(input, params)?;
    let f = params.stride;
    let (oh, ow) = (input.h * f, input.w * f);
    let ty = upsample_taps(oh, input.h, params.kernel_h, f, params.padding);
    let tx = upsample_taps(ow, input.w, params.kernel_w, f, params.padding);
    let kk = params.kernel_h * params.kernel_w;
    let mut out = Tensor4::zeros(input.n, input.c, oh, ow);
    for n in 0..input.n {
        for c in 0..input.c {
            let src = input.plane(n, c);
            let kernel = &params.weights[c * kk..(c + 1) * kk];
            let b = params.bias[c];
            let dst = out.plane_mut(n, c);
            for (oy, ys) in ty.iter().enumerate() {
                for (ox, xs) in tx.iter().enumerate() {
                    let mut acc = b;
                    for &(ky, iy) in ys {
                        for &(kx, ix) in xs {
                            acc += kernel[ky * params.kernel_w + kx] * src[iy * input.w + ix];
                        }
                    }
                    dst[oy * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample`].
pub fn upsample_grad(
    input: &Tensor4,
    params: &ConvParams,
    grad_out: &Tensor4,
    want_input: bool,
) -> Result<ConvGrads> {
    check_upsample(input, params)?;
    let f = params.stride;
    let (oh, ow) = (input.h * f, input.w * f);
    if grad_out.dims() != [input.n, input.c, oh, ow] {
        return Err(Error::ShapeMismatch(format!(
            "grad_out {:?} does not match upsample output",
            grad_out.dims()
        )));
    }
    let ty = upsample_taps(oh, input.h, params.kernel_h, f, params.padding);
    let tx = upsample_taps(ow, input.w, params.kernel_w, f, params.padding);
    let kk = params.kernel_h * params.kernel_w;
    let mut gw = vec![0.0; params.weights.len()];
    let mut gb = vec![0.0; params.bias.len()];
    let mut gin = want_input.then(|| Tensor4::zeros(input.n, input.c, input.h, input.w));
    for n in 0..input.n {
        for c in 0..input.c {
            let src = input.plane(n, c);
            let g = grad_out.plane(n, c);
            let kernel = &params.weights[c * kk..(c + 1) * kk];
            let gk = &mut gw[c * kk..(c + 1) * kk];
            gb[c] += g.iter().sum::<f64>();
            for (oy, ys) in ty.iter().enumerate() {
                for (ox, xs) in tx.iter().enumerate() {
                    let gv = g[oy * ow + ox];
                    for &(ky, iy) in ys {
                        for &(kx, ix) in xs {
                            let t = ky * params.kernel_w + kx;
                            gk[t] += gv * src[iy * input.w + ix];
                            if let Some(gin) = gin.as_mut() {
                                gin.plane_mut(n, c)[iy * input.w + ix] += kernel[t] * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gin,
        weights: gw,
        bias: gb,
    })
}

pub fn relu(input: &Tensor4) -> Tensor4 {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient of [`relu`] given its forward output.
pub fn relu_grad(output: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let mut g = grad_out.clone();
    for (gv, &o) in g.data.iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

pub fn add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout. In train mode each element is zeroed with probability
/// `rate` and survivors scaled by `1 / (1 - rate)`; the per-element scale is
/// returned so the backward pass can reuse it. Eval mode is the identity.
pub fn dropout(
    input: &Tensor4,
    rate: f64,
    rng: &mut RngStream,
    mode: Mode,
) -> Result<(Tensor4, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..input.len())
        .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
        .collect();
    let mut out = input.clone();
    for (v, m) in out.data.iter_mut().zip(&mask) {
        *v *= m;
    }
    Ok((out, Some(mask)))
}

pub fn dropout_grad(mask: Option<&[f64]>, grad_out: &Tensor4) -> Tensor4 {
    match mask {
        None => grad_out.clone(),
        Some(mask) => {
            let mut g = grad_out.clone();
            for (v, m) in g.data.iter_mut().zip(mask) {
                *v *= m;
            }
            g
        }
    }
}
