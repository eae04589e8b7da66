//! Dense row-major `f32` tensors and the convolution kernels the network needs.
//!
//! Activations use NCHW layout. Convolutions lower to `im2col` followed by a
//! single GEMM per image, which is the fastest option on narrow CPU builds for
//! the small channel counts used here.

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// First element, for scalar-valued tensors.
    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            s => Err(shape_err!("expected a 4-d tensor, got shape {:?}", s)),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// Row-major `C = op(A)·op(B) + beta·C` where `op(A)` is `m×k` and `op(B)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self) -> Result<(usize, usize)> {
        let eff_h = self.height + 2 * self.pad;
        let eff_w = self.width + 2 * self.pad;
        if eff_h < self.kernel || eff_w < self.kernel || self.stride == 0 {
            return Err(shape_err!(
                "kernel {} does not fit input {}x{} with padding {}",
                self.kernel,
                self.height,
                self.width,
                self.pad
            ));
        }
        Ok((
            (eff_h - self.kernel) / self.stride + 1,
            (eff_w - self.kernel) / self.stride + 1,
        ))
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (Ho·Wo)` column matrix.
pub(crate) fn im2col(x: &[f32], g: ConvGeom, ho: usize, wo: usize, col: &mut [f32]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let plane = ho * wo;
    for c in 0..g.channels {
        let src = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * plane;
                for oy in 0..ho {
                    let dst = &mut col[row + oy * wo..row + (oy + 1) * wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 {
                        let shift = kx as isize - g.pad as isize;
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize + shift;
                            *d = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back, accumulating into `x`.
pub(crate) fn col2im(col: &[f32], g: ConvGeom, ho: usize, wo: usize, x: &mut [f32]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let plane = ho * wo;
    for c in 0..g.channels {
        let dst = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * plane;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &col[row + oy * wo..row + (oy + 1) * wo];
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += *s;
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

/// `x: [N,C,H,W]`, `w: [O,C,k,k]`, optional `bias: [O]`.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, wc, k, k2) = w.dims4()?;
    if wc != c || k != k2 {
        return Err(shape_err!(
            "conv2d weight {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        ));
    }
    if let Some(b) = bias {
        if b.numel() != o {
            return Err(shape_err!("conv2d bias has {} entries, expected {}", b.numel(), o));
        }
    }
    let g = ConvGeom {
        channels: c,
        height: h,
        width: wd,
        kernel: k,
        stride,
        pad,
    };
    let (ho, wo) = g.out_size()?;
    let plane = ho * wo;
    let mut y = Tensor::zeros(&[n, o, ho, wo]);
    let pointwise = is_pointwise(k, stride, pad);
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![0.0; g.col_rows() * plane]
    };
    for i in 0..n {
        let xi = &x.data[i * c * h * wd..(i + 1) * c * h * wd];
        let yi = &mut y.data[i * o * plane..(i + 1) * o * plane];
        let src = if pointwise {
            xi
        } else {
            im2col(xi, g, ho, wo, &mut col);
            &col
        };
        gemm(o, g.col_rows(), plane, &w.data, false, src, false, yi, 0.0);
        if let Some(b) = bias {
            for (oc, bv) in b.data.iter().enumerate() {
                for v in &mut yi[oc * plane..(oc + 1) * plane] {
                    *v += *bv;
                }
            }
        }
    }
    Ok(y)
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, _, k, _) = w.dims4()?;
    let (_, _, ho, wo) = dy.dims4()?;
    let g = ConvGeom {
        channels: c,
        height: h,
        width: wd,
        kernel: k,
        stride,
        pad,
    };
    let plane = ho * wo;
    let rows = g.col_rows();
    let pointwise = is_pointwise(k, stride, pad);
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[o]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut col = if pointwise { Vec::new() } else { vec![0.0; rows * plane] };
    let mut dcol = vec![0.0; rows * plane];
    for i in 0..n {
        let xi = &x.data[i * c * h * wd..(i + 1) * c * h * wd];
        let dyi = &dy.data[i * o * plane..(i + 1) * o * plane];
        for oc in 0..o {
            db.data[oc] += dyi[oc * plane..(oc + 1) * plane].iter().sum::<f32>();
        }
        let src = if pointwise {
            xi
        } else {
            im2col(xi, g, ho, wo, &mut col);
            &col
        };
        // dW[o, rows] += dY[o, plane] · col[rows, plane]^T
        gemm(o, plane, rows, dyi, false, src, true, &mut dw.data, 1.0);
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx.data[i * c * h * wd..(i + 1) * c * h * wd];
            if pointwise {
                gemm(rows, o, plane, &w.data, true, dyi, false, dxi, 0.0);
            } else {
                gemm(rows, o, plane, &w.data, true, dyi, false, &mut dcol, 0.0);
                col2im(&dcol, g, ho, wo, dxi);
            }
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

/// Transposed convolution without padding. `w: [Cin, Cout, k, k]`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
) -> Result<Tensor> {
    let (n, cin, h, wd) = x.dims4()?;
    let (wcin, cout, k, k2) = w.dims4()?;
    if wcin != cin || k != k2 || stride == 0 {
        return Err(shape_err!(
            "conv_transpose2d weight {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        ));
    }
    let ho = (h - 1) * stride + k;
    let wo = (wd - 1) * stride + k;
    let g = ConvGeom {
        channels: cout,
        height: ho,
        width: wo,
        kernel: k,
        stride,
        pad: 0,
    };
    let plane_in = h * wd;
    let rows = g.col_rows();
    let mut col = vec![0.0; rows * plane_in];
    let mut y = Tensor::zeros(&[n, cout, ho, wo]);
    for i in 0..n {
        let xi = &x.data[i * cin * plane_in..(i + 1) * cin * plane_in];
        gemm(rows, cin, plane_in, &w.data, true, xi, false, &mut col, 0.0);
        let yi = &mut y.data[i * cout * ho * wo..(i + 1) * cout * ho * wo];
        col2im(&col, g, h, wd, yi);
        if let Some(b) = bias {
            for (oc, bv) in b.data.iter().enumerate() {
                for v in &mut yi[oc * ho * wo..(oc + 1) * ho * wo] {
                    *v += *bv;
                }
            }
        }
    }
    Ok(y)
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    need_dx: bool,
) -> Result<ConvGrads> {
    let (n, cin, h, wd) = x.dims4()?;
    let (_, cout, k, _) = w.dims4()?;
    let (_, _, ho, wo) = dy.dims4()?;
    let g = ConvGeom {
        channels: cout,
        height: ho,
        width: wo,
        kernel: k,
        stride,
        pad: 0,
    };
    let plane_in = h * wd;
    let rows = g.col_rows();
    let mut dcol = vec![0.0; rows * plane_in];
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    for i in 0..n {
        let dyi = &dy.data[i * cout * ho * wo..(i + 1) * cout * ho * wo];
        for oc in 0..cout {
            db.data[oc] += dyi[oc * ho * wo..(oc + 1) * ho * wo].iter().sum::<f32>();
        }
        im2col(dyi, g, h, wd, &mut dcol);
        let xi = &x.data[i * cin * plane_in..(i + 1) * cin * plane_in];
        // dW[cin, rows] += x[cin, plane] · dcol[rows, plane]^T
        gemm(cin, plane_in, rows, xi, false, &dcol, true, &mut dw.data, 1.0);
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx.data[i * cin * plane_in..(i + 1) * cin * plane_in];
            gemm(cin, rows, plane_in, &w.data, false, &dcol, false, dxi, 0.0);
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

/// Non-overlapping max pooling with window and stride `k`. Returns the
/// pooled tensor and the flat in-plane index of each selected input.
pub fn max_pool2d(x: &Tensor, k: usize) -> Result<(Tensor, Vec<u32>)> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || h < k || w < k {
        return Err(shape_err!("pool window {} larger than input {}x{}", k, h, w));
    }
    let (ho, wo) = (h / k, w / k);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let mut idx = vec![0u32; n * c * ho * wo];
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0usize;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = (oy * k + dy) * w + ox * k + dx;
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                }
                let o = plane * ho * wo + oy * wo + ox;
                y.data[o] = best;
                idx[o] = best_i as u32;
            }
        }
    }
    Ok((y, idx))
}

/// Concatenates NCHW tensors with equal N, H and W along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err!("concat of zero tensors"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if pn != n || ph != h || pw != w {
            return Err(shape_err!(
                "cannot concatenate {:?} with {:?} along channels",
                p.shape(),
                first.shape()
            ));
        }
        total_c += pc;
    }
    let mut out = Tensor::zeros(&[n, total_c, h, w]);
    let plane = h * w;
    for i in 0..n {
        let mut offset = i * total_c * plane;
        for p in parts {
            let pc = p.shape[1];
            let src = &p.data[i * pc * plane..(i + 1) * pc * plane];
            out.data[offset..offset + src.len()].copy_from_slice(src);
            offset += src.len();
        }
    }
    Ok(out)
}

/// Inverse of [`concat_channels`]: splits `t` into slabs with the given channel counts.
pub fn split_channels(t: &Tensor, counts: &[usize]) -> Result<Vec<Tensor>> {
    let (n, c, h, w) = t.dims4()?;
    if counts.iter().sum::<usize>() != c {
        return Err(shape_err!("split {:?} does not cover {} channels", counts, c));
    }
    let plane = h * w;
    let mut outs: Vec<Tensor> = counts.iter().map(|&pc| Tensor::zeros(&[n, pc, h, w])).collect();
    for i in 0..n {
        let mut offset = i * c * plane;
        for (out, &pc) in outs.iter_mut().zip(counts) {
            let len = pc * plane;
            out.data[i * len..(i + 1) * len].copy_from_slice(&t.data[offset..offset + len]);
            offset += len;
        }
    }
    Ok(outs)
}
