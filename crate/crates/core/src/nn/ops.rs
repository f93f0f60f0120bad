//! Differentiable image operators on `[n, c, h, w]` tensors.

use crate::tensor::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{BackwardFn, Graph, Result, Tensor, TensorError, Var};

use super::Padding;

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(TensorError::Rank { op, expected: 4, shape: t.shape().to_vec() }),
    }
}

/// Output extent and leading pad for one spatial axis.
pub(crate) fn out_extent(extent: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = extent.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(extent);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if extent < kernel {
                return Err(TensorError::SpatialUnderflow { extent, kernel });
            }
            Ok(((extent - kernel) / stride + 1, 0))
        }
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_t: usize,
    pad_l: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source column for output column `ox` at kernel offset `kj`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let s = (o * self.stride + k).checked_sub(pad)?;
        (s < extent).then_some(s)
    }

    /// Visits (output index, input index, kernel index) for one plane.
    fn taps(&self, mut f: impl FnMut(usize, usize, usize)) {
        for oy in 0..self.oh {
            for ki in 0..self.kh {
                let Some(sy) = self.src(oy, ki, self.pad_t, self.h) else { continue };
                for ox in 0..self.ow {
                    for kj in 0..self.kw {
                        if let Some(sx) = self.src(ox, kj, self.pad_l, self.w) {
                            f(oy * self.ow + ox, sy * self.w + sx, ki * self.kw + kj);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let p = self.cols();
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let out = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match self.src(oy, ki, self.pad_t, self.h) {
                            None => out.fill(0.0),
                            Some(sy) => {
                                let src = &plane[sy * self.w..(sy + 1) * self.w];
                                for (ox, v) in out.iter_mut().enumerate() {
                                    *v = match self.src(ox, kj, self.pad_l, self.w) {
                                        Some(sx) => src[sx],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let p = self.cols();
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let Some(sy) = self.src(oy, ki, self.pad_t, self.h) else { continue };
                        for ox in 0..self.ow {
                            if let Some(sx) = self.src(ox, kj, self.pad_l, self.w) {
                                plane[sy * self.w + sx] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation. `w` is `[out, in, kh, kw]`, `b` is `[out]`.
pub fn conv2d(g: &mut Graph, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
    let [n, c, h, wd] = dims4("conv2d", g.value(x))?;
    let [o, ci, kh, kw] = dims4("conv2d", g.value(w))?;
    if c != ci {
        return Err(TensorError::ChannelMismatch { input: c, expected: ci });
    }
    if let Some(b) = b {
        if g.shape(b) != [o] {
            return Err(TensorError::ShapeMismatch { op: "conv2d bias", lhs: vec![o], rhs: g.shape(b).to_vec() });
        }
    }
    if stride == 0 {
        return Err(TensorError::Invalid("conv2d stride must be positive".into()));
    }
    let (oh, pad_t) = out_extent(h, kh, stride, padding)?;
    let (ow, pad_l) = out_extent(wd, kw, stride, padding)?;
    let geom = ConvGeom { c, h, w: wd, kh, kw, stride, pad_t, pad_l, oh, ow };
    let (rows, p) = (geom.rows(), geom.cols());

    let xd = g.value(x).data();
    let wdata = g.value(w).data();
    let mut out = vec![0.0f32; n * o * p];
    let mut cols = vec![0.0f32; rows * p];
    for img in 0..n {
        let dst = &mut out[img * o * p..(img + 1) * o * p];
        if let Some(b) = b {
            for (oc, &bv) in g.value(b).data().iter().enumerate() {
                dst[oc * p..(oc + 1) * p].fill(bv);
            }
        }
        geom.im2col(&xd[img * c * h * wd..(img + 1) * c * h * wd], &mut cols);
        gemm_nn(o, rows, p, wdata, &cols, dst);
    }
    let value = Tensor::new(vec![n, o, oh, ow], out)?;

    let backward: BackwardFn = Box::new(move |args| {
        let (xd, wdata, gy) = (args.inputs[0].data(), args.inputs[1].data(), args.grad);
        let mut gx = args.needs[0].then(|| vec![0.0f32; xd.len()]);
        let mut gw = args.needs[1].then(|| vec![0.0f32; wdata.len()]);
        let mut cols = vec![0.0f32; rows * p];
        let mut dcols = vec![0.0f32; rows * p];
        let in_size = c * h * wd;
        for img in 0..n {
            let gimg = &gy[img * o * p..(img + 1) * o * p];
            if let Some(gw) = gw.as_mut() {
                geom.im2col(&xd[img * in_size..(img + 1) * in_size], &mut cols);
                gemm_nt(o, p, rows, gimg, &cols, gw);
            }
            if let Some(gx) = gx.as_mut() {
                dcols.fill(0.0);
                gemm_tn(rows, o, p, wdata, gimg, &mut dcols);
                geom.col2im(&dcols, &mut gx[img * in_size..(img + 1) * in_size]);
            }
        }
        let mut grads = vec![gx, gw];
        if args.inputs.len() == 3 {
            grads.push(args.needs[2].then(|| {
                let mut gb = vec![0.0f32; o];
                for img in 0..n {
                    for (oc, acc) in gb.iter_mut().enumerate() {
                        let s = (img * o + oc) * p;
                        *acc += gy[s..s + p].iter().sum::<f32>();
                    }
                }
                gb
            }));
        }
        grads
    });
    let mut inputs = vec![x, w];
    inputs.extend(b);
    Ok(g.push_op("conv2d", value, inputs, backward))
}

/// Per-channel convolution; `w` is `[c, 1, kh, kw]`.
pub fn depthwise_conv2d(g: &mut Graph, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
    let [n, c, h, wd] = dims4("depthwise_conv2d", g.value(x))?;
    let [wc, one, kh, kw] = dims4("depthwise_conv2d", g.value(w))?;
    if wc != c {
        return Err(TensorError::ChannelMismatch { input: c, expected: wc });
    }
    if one != 1 {
        return Err(TensorError::Invalid(format!("depthwise kernel must have shape [c, 1, kh, kw], got {:?}", g.shape(w))));
    }
    if stride == 0 {
        return Err(TensorError::Invalid("depthwise stride must be positive".into()));
    }
    let (oh, pad_t) = out_extent(h, kh, stride, padding)?;
    let (ow, pad_l) = out_extent(wd, kw, stride, padding)?;
    let geom = ConvGeom { c: 1, h, w: wd, kh, kw, stride, pad_t, pad_l, oh, ow };

    let xd = g.value(x).data();
    let wdata = g.value(w).data();
    let (plane_in, plane_out, kk) = (h * wd, oh * ow, kh * kw);
    let mut out = vec![0.0f32; n * c * plane_out];
    for img in 0..n {
        for ch in 0..c {
            let base = img * c + ch;
            let src = &xd[base * plane_in..(base + 1) * plane_in];
            let ker = &wdata[ch * kk..(ch + 1) * kk];
            let dst = &mut out[base * plane_out..(base + 1) * plane_out];
            geom.taps(|o, i, k| dst[o] += ker[k] * src[i]);
        }
    }
    let value = Tensor::new(vec![n, c, oh, ow], out)?;

    let backward: BackwardFn = Box::new(move |args| {
        let (xd, wdata, gy) = (args.inputs[0].data(), args.inputs[1].data(), args.grad);
        let mut gx = args.needs[0].then(|| vec![0.0f32; xd.len()]);
        let mut gw = args.needs[1].then(|| vec![0.0f32; wdata.len()]);
        for img in 0..n {
            for ch in 0..c {
                let base = img * c + ch;
                let src = &xd[base * plane_in..(base + 1) * plane_in];
                let gout = &gy[base * plane_out..(base + 1) * plane_out];
                if let Some(gw) = gw.as_mut() {
                    let gk = &mut gw[ch * kk..(ch + 1) * kk];
                    geom.taps(|o, i, k| gk[k] += gout[o] * src[i]);
                }
                if let Some(gx) = gx.as_mut() {
                    let ker = &wdata[ch * kk..(ch + 1) * kk];
                    let gin = &mut gx[base * plane_in..(base + 1) * plane_in];
                    geom.taps(|o, i, k| gin[i] += gout[o] * ker[k]);
                }
            }
        }
        vec![gx, gw]
    });
    Ok(g.push_op("depthwise_conv2d", value, vec![x, w], backward))
}

/// 2×2 max pooling with stride 2. Ties resolve to the first element of the
/// window in row-major order.
pub fn maxpool2x2(g: &mut Graph, x: Var) -> Result<Var> {
    let [n, c, h, w] = dims4("maxpool2x2", g.value(x))?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::OddExtent { op: "maxpool2x2", height: h, width: w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = g.value(x).data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut arg = vec![0usize; out.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                out[o] = xd[best];
                arg[o] = best;
            }
        }
    }
    let value = Tensor::new(vec![n, c, oh, ow], out)?;
    let backward: BackwardFn = Box::new(move |args| {
        let mut gx = vec![0.0f32; args.inputs[0].numel()];
        for (o, &i) in arg.iter().enumerate() {
            gx[i] += args.grad[o];
        }
        vec![Some(gx)]
    });
    Ok(g.push_op("maxpool2x2", value, vec![x], backward))
}

/// Replicates each pixel into a 2×2 block.
pub fn upsample_nearest2x(g: &mut Graph, x: Var) -> Result<Var> {
    let [n, c, h, w] = dims4("upsample_nearest2x", g.value(x))?;
    let (oh, ow) = (2 * h, 2 * w);
    let xd = g.value(x).data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    for plane in 0..n * c {
        for oy in 0..oh {
            let src = &xd[(plane * h + oy / 2) * w..(plane * h + oy / 2 + 1) * w];
            let dst = &mut out[(plane * oh + oy) * ow..(plane * oh + oy + 1) * ow];
            for (ox, v) in dst.iter_mut().enumerate() {
                *v = src[ox / 2];
            }
        }
    }
    let value = Tensor::new(vec![n, c, oh, ow], out)?;
    let backward: BackwardFn = Box::new(move |args| {
        let mut gx = vec![0.0f32; n * c * h * w];
        for plane in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    gx[(plane * h + oy / 2) * w + ox / 2] += args.grad[(plane * oh + oy) * ow + ox];
                }
            }
        }
        vec![Some(gx)]
    });
    Ok(g.push_op("upsample_nearest2x", value, vec![x], backward))
}

fn channel_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.rank() < 2 {
        return Err(TensorError::Rank { op, expected: 4, shape: t.shape().to_vec() });
    }
    let (n, c) = (t.shape()[0], t.shape()[1]);
    if c < 2 {
        return Err(TensorError::Invalid(format!("{op} needs at least 2 channels, got {c}")));
    }
    Ok((n, c, t.numel() / (n * c)))
}

/// Softmax across axis 1 at every spatial position, max-shifted for stability.
pub fn softmax_channels(g: &mut Graph, x: Var) -> Result<Var> {
    let t = g.value(x);
    let (n, c, s) = channel_dims("softmax_channels", t)?;
    let xd = t.data();
    let mut out = vec![0.0f32; xd.len()];
    for img in 0..n {
        let base = img * c * s;
        for p in 0..s {
            let at = |k: usize| base + k * s + p;
            let m = (0..c).map(|k| xd[at(k)]).fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for k in 0..c {
                let e = (xd[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..c {
                out[at(k)] /= z;
            }
        }
    }
    let value = Tensor::new(t.shape().to_vec(), out)?;
    let backward: BackwardFn = Box::new(move |args| {
        let (y, gy) = (args.output.data(), args.grad);
        let mut gx = vec![0.0f32; y.len()];
        for img in 0..n {
            let base = img * c * s;
            for p in 0..s {
                let at = |k: usize| base + k * s + p;
                let dotp: f32 = (0..c).map(|k| gy[at(k)] * y[at(k)]).sum();
                for k in 0..c {
                    gx[at(k)] = y[at(k)] * (gy[at(k)] - dotp);
                }
            }
        }
        vec![Some(gx)]
    });
    Ok(g.push_op("softmax_channels", value, vec![x], backward))
}

/// `log(softmax)` across axis 1, computed without forming the softmax first.
pub fn log_softmax_channels(g: &mut Graph, x: Var) -> Result<Var> {
    let t = g.value(x);
    let (n, c, s) = channel_dims("log_softmax_channels", t)?;
    let xd = t.data();
    let mut out = vec![0.0f32; xd.len()];
    for img in 0..n {
        let base = img * c * s;
        for p in 0..s {
            let at = |k: usize| base + k * s + p;
            let m = (0..c).map(|k| xd[at(k)]).fold(f32::NEG_INFINITY, f32::max);
            let lse = m + (0..c).map(|k| (xd[at(k)] - m).exp()).sum::<f32>().ln();
            for k in 0..c {
                out[at(k)] = xd[at(k)] - lse;
            }
        }
    }
    let value = Tensor::new(t.shape().to_vec(), out)?;
    let backward: BackwardFn = Box::new(move |args| {
        let (y, gy) = (args.output.data(), args.grad);
        let mut gx = vec![0.0f32; y.len()];
        for img in 0..n {
            let base = img * c * s;
            for p in 0..s {
                let at = |k: usize| base + k * s + p;
                let total: f32 = (0..c).map(|k| gy[at(k)]).sum();
                for k in 0..c {
                    gx[at(k)] = gy[at(k)] - y[at(k)].exp() * total;
                }
            }
        }
        vec![Some(gx)]
    });
    Ok(g.push_op("log_softmax_channels", value, vec![x], backward))
}

/// Concatenates `[n, c_i, h, w]` tensors along the channel axis.
pub fn concat_channels(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let first = dims4("concat_channels", g.value(parts[0]))?;
    let mut widths = Vec::with_capacity(parts.len());
    for &v in parts {
        let d = dims4("concat_channels", g.value(v))?;
        if d[0] != first[0] || d[2] != first[2] || d[3] != first[3] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: first.to_vec(),
                rhs: d.to_vec(),
            });
        }
        widths.push(d[1]);
    }
    let [n, _, h, w] = first;
    let plane = h * w;
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(n * total * plane);
    for img in 0..n {
        for (&v, &cw) in parts.iter().zip(&widths) {
            out.extend_from_slice(&g.value(v).data()[img * cw * plane..(img + 1) * cw * plane]);
        }
    }
    let value = Tensor::new(vec![n, total, h, w], out)?;
    let backward: BackwardFn = Box::new(move |args| {
        let mut grads: Vec<Vec<f32>> = widths.iter().map(|&cw| Vec::with_capacity(n * cw * plane)).collect();
        let mut offset = 0;
        for _ in 0..n {
            for (gi, &cw) in grads.iter_mut().zip(&widths) {
                gi.extend_from_slice(&args.grad[offset..offset + cw * plane]);
                offset += cw * plane;
            }
        }
        grads.into_iter().map(Some).collect()
    });
    Ok(g.push_op("concat_channels", value, parts.to_vec(), backward))
}
