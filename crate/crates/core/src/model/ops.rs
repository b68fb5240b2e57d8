//! NCHW tensor kernels with hand-written backward passes.

/// Dense `n × c × h × w` activations.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample(&self, b: usize) -> &[f32] {
        let len = self.c * self.plane();
        &self.data[b * len..(b + 1) * len]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f32] {
        let len = self.c * self.plane();
        &mut self.data[b * len..(b + 1) * len]
    }

    pub fn same_shape(&self) -> Self {
        Self::zeros(self.n, self.c, self.h, self.w)
    }
}

/// `c = a·b + beta·c` with `a: m×k`, `b: k×n`, either operand optionally stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly the m×k, k×n and m×n elements the strides address.
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

/// Geometry of a square 3×3 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub dilation: usize,
}

pub const KSIZE: usize = 3;

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.dilation
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (KSIZE - 1) + 1;
        (
            (h + 2 * self.pad() - span) / self.stride + 1,
            (w + 2 * self.pad() - span) / self.stride + 1,
        )
    }

    pub fn fan_in(&self) -> usize {
        self.cin * KSIZE * KSIZE
    }
}

fn im2col(x: &[f32], h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, cols: &mut [f32]) {
    let pad = g.pad() as isize;
    for c in 0..g.cin {
        let src = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = (c * KSIZE + ky) * KSIZE + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                let oy_off = (ky * g.dilation) as isize - pad;
                let ox_off = (kx * g.dilation) as isize - pad;
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize + oy_off;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + ox_off;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { srow[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, dx: &mut [f32]) {
    let pad = g.pad() as isize;
    for c in 0..g.cin {
        let dst = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = (c * KSIZE + ky) * KSIZE + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                let oy_off = (ky * g.dilation) as isize - pad;
                let ox_off = (kx * g.dilation) as isize - pad;
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize + oy_off;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * g.stride) as isize + ox_off;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Output positions `o` along one axis with `0 <= o + off < len`, for stride 1.
fn valid_span(out_len: usize, in_len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (in_len as isize - off).clamp(0, out_len as isize) as usize;
    (lo.min(hi), hi)
}

/// Calls `f(ci, tap, oy, ox0, ox1, iy, ix0)` for every valid row segment of a stride-1 conv.
fn for_each_row(g: &ConvGeom, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize)) {
    let pad = g.pad() as isize;
    for ci in 0..g.cin {
        for ky in 0..KSIZE {
            let oy_off = (ky * g.dilation) as isize - pad;
            let (y0, y1) = valid_span(h, h, oy_off);
            for kx in 0..KSIZE {
                let ox_off = (kx * g.dilation) as isize - pad;
                let (x0, x1) = valid_span(w, w, ox_off);
                if x0 >= x1 {
                    continue;
                }
                let ix0 = (x0 as isize + ox_off) as usize;
                for oy in y0..y1 {
                    f(ci, ky * KSIZE + kx, oy, x0, x1, (oy as isize + oy_off) as usize, ix0);
                }
            }
        }
    }
}

/// Narrow stride-1 convolutions skip im2col; the gemm would be mostly packing.
fn use_direct(g: &ConvGeom) -> bool {
    g.stride == 1 && g.cout <= 4
}

/// Input activations kept for the backward pass.
#[derive(Debug, Default)]
pub struct ConvCache {
    input: Option<Tensor>,
}

pub fn conv_forward(
    x: &Tensor,
    weight: &[f32],
    bias: Option<&[f32]>,
    g: &ConvGeom,
    cache: Option<&mut ConvCache>,
) -> Tensor {
    debug_assert_eq!(x.c, g.cin);
    let (oh, ow) = g.out_dims(x.h, x.w);
    let mut y = Tensor::zeros(x.n, g.cout, oh, ow);
    let k = g.fan_in();
    let plane_out = oh * ow;
    let mut cols = if use_direct(g) { Vec::new() } else { vec![0.0; k * plane_out] };
    for b in 0..x.n {
        let out = y.sample_mut(b);
        if let Some(bias) = bias {
            for (co, chunk) in out.chunks_mut(plane_out).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[co]);
            }
        }
        if use_direct(g) {
            let src = x.sample(b);
            for_each_row(g, x.h, x.w, |ci, tap, oy, x0, x1, iy, ix0| {
                let srow = &src[ci * x.h * x.w + iy * x.w + ix0..][..x1 - x0];
                for co in 0..g.cout {
                    let wv = weight[(co * g.cin + ci) * KSIZE * KSIZE + tap];
                    let drow = &mut out[co * plane_out + oy * ow + x0..][..x1 - x0];
                    for (d, &s) in drow.iter_mut().zip(srow) {
                        *d += wv * s;
                    }
                }
            });
        } else {
            im2col(x.sample(b), x.h, x.w, g, oh, ow, &mut cols);
            gemm(g.cout, k, plane_out, weight, false, &cols, false, if bias.is_some() { 1.0 } else { 0.0 }, out);
        }
    }
    if let Some(c) = cache {
        c.input = Some(x.clone());
    }
    y
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn conv_backward(
    dy: &Tensor,
    weight: &[f32],
    g: &ConvGeom,
    cache: &ConvCache,
    dweight: &mut [f32],
    dbias: Option<&mut [f32]>,
    need_dx: bool,
) -> Option<Tensor> {
    let x = cache.input.as_ref().expect("conv cache holds the forward input");
    let (oh, ow) = (dy.h, dy.w);
    let plane_out = oh * ow;
    let k = g.fan_in();
    if let Some(db) = dbias {
        for b in 0..dy.n {
            for (co, chunk) in dy.sample(b).chunks(plane_out).enumerate() {
                db[co] += chunk.iter().sum::<f32>();
            }
        }
    }
    let mut dx = need_dx.then(|| Tensor::zeros(dy.n, g.cin, x.h, x.w));
    if use_direct(g) {
        for b in 0..dy.n {
            let src = x.sample(b);
            let dys = dy.sample(b);
            let mut dxs = dx.as_mut().map(|t| t.sample_mut(b));
            for_each_row(g, x.h, x.w, |ci, tap, oy, x0, x1, iy, ix0| {
                let off = ci * x.h * x.w + iy * x.w + ix0;
                let srow = &src[off..][..x1 - x0];
                for co in 0..g.cout {
                    let widx = (co * g.cin + ci) * KSIZE * KSIZE + tap;
                    let drow = &dys[co * plane_out + oy * ow + x0..][..x1 - x0];
                    dweight[widx] += drow.iter().zip(srow).map(|(a, b)| a * b).sum::<f32>();
                    if let Some(dxs) = dxs.as_deref_mut() {
                        let wv = weight[widx];
                        for (t, &d) in dxs[off..][..x1 - x0].iter_mut().zip(drow) {
                            *t += wv * d;
                        }
                    }
                }
            });
        }
        return dx;
    }
    let mut cols = vec![0.0; k * plane_out];
    for b in 0..dy.n {
        im2col(x.sample(b), x.h, x.w, g, oh, ow, &mut cols);
        gemm(g.cout, plane_out, k, dy.sample(b), false, &cols, true, 1.0, dweight);
        if let Some(dx) = dx.as_mut() {
            gemm(k, g.cout, plane_out, weight, true, dy.sample(b), false, 0.0, &mut cols);
            col2im(&cols, x.h, x.w, g, oh, ow, dx.sample_mut(b));
        }
    }
    dx
}

pub const BN_EPS: f32 = 1e-5;

#[derive(Debug, Default)]
pub struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

/// Batch normalization. In training mode batch statistics are used and the
/// running averages are updated with `momentum`.
#[allow(clippy::too_many_arguments)]
pub fn bn_forward(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &mut [f32],
    running_var: &mut [f32],
    momentum: f32,
    train: bool,
    cache: Option<&mut BnCache>,
) -> Tensor {
    let plane = x.plane();
    let m = (x.n * plane) as f64;
    let mut y = x.same_shape();
    let mut xhat_all = if cache.is_some() { vec![0.0; x.data.len()] } else { Vec::new() };
    let mut inv_stds = vec![0.0; x.c];
    for c in 0..x.c {
        let (mean, var) = if train {
            let mut s = 0.0f64;
            for b in 0..x.n {
                s += x.sample(b)[c * plane..(c + 1) * plane].iter().map(|&v| f64::from(v)).sum::<f64>();
            }
            let mean = s / m;
            let mut ss = 0.0f64;
            for b in 0..x.n {
                ss += x.sample(b)[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&v| (f64::from(v) - mean).powi(2))
                    .sum::<f64>();
            }
            let var = ss / m;
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean as f32;
            running_var[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased as f32;
            (mean as f32, var as f32)
        } else {
            (running_mean[c], running_var[c])
        };
        let inv_std = 1.0 / (var + BN_EPS).sqrt();
        inv_stds[c] = inv_std;
        for b in 0..x.n {
            let off = b * x.c * plane + c * plane;
            for i in off..off + plane {
                let xh = (x.data[i] - mean) * inv_std;
                if !xhat_all.is_empty() {
                    xhat_all[i] = xh;
                }
                y.data[i] = gamma[c] * xh + beta[c];
            }
        }
    }
    if let Some(cache) = cache {
        cache.xhat = xhat_all;
        cache.inv_std = inv_stds;
    }
    y
}

pub fn bn_backward(dy: &Tensor, gamma: &[f32], cache: &BnCache, dgamma: &mut [f32], dbeta: &mut [f32]) -> Tensor {
    let plane = dy.plane();
    let m = (dy.n * plane) as f32;
    let mut dx = dy.same_shape();
    for c in 0..dy.c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..dy.n {
            let off = b * dy.c * plane + c * plane;
            for i in off..off + plane {
                sum_dy += f64::from(dy.data[i]);
                sum_dy_xhat += f64::from(dy.data[i] * cache.xhat[i]);
            }
        }
        dgamma[c] += sum_dy_xhat as f32;
        dbeta[c] += sum_dy as f32;
        let k = gamma[c] * cache.inv_std[c] / m;
        let (sd, sdx) = (sum_dy as f32, sum_dy_xhat as f32);
        for b in 0..dy.n {
            let off = b * dy.c * plane + c * plane;
            for i in off..off + plane {
                dx.data[i] = k * (m * dy.data[i] - sd - cache.xhat[i] * sdx);
            }
        }
    }
    dx
}

pub fn relu_inplace(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward_inplace(dy: &mut Tensor, out: &Tensor) {
    for (d, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
}

pub fn upsample2(x: &Tensor) -> Tensor {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.n, x.c, h2, w2);
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        let dst = &mut y.data[nc * h2 * w2..(nc + 1) * h2 * w2];
        for yy in 0..h2 {
            let srow = &src[(yy / 2) * x.w..(yy / 2 + 1) * x.w];
            for (xx, v) in dst[yy * w2..(yy + 1) * w2].iter_mut().enumerate() {
                *v = srow[xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for nc in 0..dy.n * dy.c {
        let src = &dy.data[nc * dy.h * dy.w..(nc + 1) * dy.h * dy.w];
        let dst = &mut dx.data[nc * h * w..(nc + 1) * h * w];
        for yy in 0..dy.h {
            for xx in 0..dy.w {
                dst[(yy / 2) * w + xx / 2] += src[yy * dy.w + xx];
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert!(a.n == b.n && a.h == b.h && a.w == b.w);
    let mut y = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for s in 0..a.n {
        let out = y.sample_mut(s);
        let la = a.sample(s).len();
        out[..la].copy_from_slice(a.sample(s));
        out[la..].copy_from_slice(b.sample(s));
    }
    y
}

/// Gradient of the first `c` channels of a concatenation.
pub fn concat_backward_first(dy: &Tensor, c: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.n, c, dy.h, dy.w);
    let len = c * dy.plane();
    for s in 0..dy.n {
        dx.sample_mut(s).copy_from_slice(&dy.sample(s)[..len]);
    }
    dx
}

pub fn add_inplace(a: &mut Tensor, b: &Tensor) {
    for (x, &y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, wt: &[f32], g: &ConvGeom) -> Tensor {
        let (oh, ow) = g.out_dims(x.h, x.w);
        let mut y = Tensor::zeros(x.n, g.cout, oh, ow);
        for b in 0..x.n {
            for co in 0..g.cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..g.cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad() as isize;
                                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad() as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                        acc += wt[((co * g.cin + ci) * 3 + ky) * 3 + kx]
                                            * x.data[((b * g.cin + ci) * x.h + iy as usize) * x.w + ix as usize];
                                    }
                                }
                            }
                        }
                        y.data[((b * g.cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn filled(n: usize, c: usize, h: usize, w: usize, seed: usize) -> Tensor {
        let mut t = Tensor::zeros(n, c, h, w);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = (((i + seed) * 2654435761) % 1000) as f32 / 500.0 - 1.0;
        }
        t
    }

    #[test]
    fn conv_matches_naive() {
        for g in [
            ConvGeom { cin: 2, cout: 3, stride: 1, dilation: 1 },
            ConvGeom { cin: 2, cout: 3, stride: 2, dilation: 1 },
            ConvGeom { cin: 3, cout: 2, stride: 1, dilation: 2 },
            ConvGeom { cin: 3, cout: 6, stride: 1, dilation: 1 },
        ] {
            let x = filled(2, g.cin, 8, 6, 1);
            let wt = filled(1, g.cout * g.cin * 9, 1, 1, 7).data;
            let fast = conv_forward(&x, &wt, None, &g, None);
            let slow = naive_conv(&x, &wt, &g);
            assert_eq!((fast.h, fast.w), (slow.h, slow.w));
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), dy> == <x, conv_backward(dy)> and == <w, dW>
        for g in [
            ConvGeom { cin: 2, cout: 3, stride: 2, dilation: 1 },
            ConvGeom { cin: 2, cout: 3, stride: 1, dilation: 2 },
            ConvGeom { cin: 2, cout: 6, stride: 1, dilation: 1 },
        ] {
            adjoint_case(g);
        }
    }

    fn adjoint_case(g: ConvGeom) {
        let x = filled(2, 2, 6, 6, 3);
        let wt = filled(1, g.cout * 18, 1, 1, 11).data;
        let mut cache = ConvCache::default();
        let y = conv_forward(&x, &wt, None, &g, Some(&mut cache));
        let dy = filled(y.n, y.c, y.h, y.w, 5);
        let mut dw = vec![0.0; wt.len()];
        let dx = conv_backward(&dy, &wt, &g, &cache, &mut dw, None, true).unwrap();
        let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| f64::from(a * b)).sum();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| f64::from(a * b)).sum();
        let rhs_w: f64 = wt.iter().zip(&dw).map(|(a, b)| f64::from(a * b)).sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0));
        assert!((lhs - rhs_w).abs() < 1e-3 * lhs.abs().max(1.0));
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = filled(1, 2, 3, 4, 2);
        let y = upsample2(&x);
        let dy = filled(1, 2, 6, 8, 9);
        let dx = upsample2_backward(&dy);
        let lhs: f32 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3);
    }
}

#[cfg(test)]
mod bn_tests {
    use super::*;

    #[test]
    fn bn_backward_matches_finite_differences() {
        let mut x = Tensor::zeros(2, 2, 3, 3);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = ((i * 7919) % 23) as f32 / 7.0 - 1.5;
        }
        let gamma = [1.3f32, 0.7];
        let beta = [0.1f32, -0.2];
        let wts: Vec<f32> = (0..36).map(|i| ((i * 13) % 11) as f32 / 5.0 - 1.0).collect();
        let obj = |x: &Tensor| -> f64 {
            let (mut m, mut v) = ([0.0; 2], [1.0; 2]);
            let y = bn_forward(x, &gamma, &beta, &mut m, &mut v, 0.1, true, None);
            y.data.iter().zip(&wts).map(|(a, b)| f64::from(a * b)).sum()
        };
        let (mut m, mut v) = ([0.0; 2], [1.0; 2]);
        let mut cache = BnCache::default();
        let _ = bn_forward(&x, &gamma, &beta, &mut m, &mut v, 0.1, true, Some(&mut cache));
        let mut dy = x.same_shape();
        dy.data.copy_from_slice(&wts);
        let (mut dg, mut db) = ([0.0; 2], [0.0; 2]);
        let dx = bn_backward(&dy, &gamma, &cache, &mut dg, &mut db);
        for i in 0..x.data.len() {
            let mut p = x.clone();
            p.data[i] += 1e-3;
            let mut q = x.clone();
            q.data[i] -= 1e-3;
            let fd = (obj(&p) - obj(&q)) / 2e-3;
            assert!((fd - f64::from(dx.data[i])).abs() < 1e-2, "{i}: {fd} vs {}", dx.data[i]);
        }
    }
}
