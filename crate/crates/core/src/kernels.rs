//! Raw convolution, transposed convolution and blur kernels over slices.
//!
//! Convolutions lower to im2col + GEMM one sample at a time. Reductions over
//! the batch (weight and bias gradients) always run in sample order, so the
//! results are bit-reproducible.

use crate::scalar::Scalar;

/// Spatial output extent of a convolution, `None` when the kernel does not fit.
pub fn conv_out_extent(input: usize, kernel: usize, pad: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Spatial output extent of a transposed convolution.
pub fn deconv_out_extent(
    input: usize,
    kernel: usize,
    pad: usize,
    stride: usize,
    out_pad: usize,
) -> Option<usize> {
    if stride == 0 || kernel == 0 || input == 0 || out_pad >= stride {
        return None;
    }
    let full = (input - 1) * stride + kernel + out_pad;
    full.checked_sub(2 * pad).filter(|&v| v > 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Plane {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Plane {
    fn len(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub stride: usize,
    /// Extent of the grid the window slides over.
    pub oh: usize,
    pub ow: usize,
}

/// Output columns `ox` whose input column `ox * stride + k - pad` lies in `0..w`.
fn valid_range(w: usize, out: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if w + pad > k { ((w + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds `x` (one `[C,H,W]` sample) into `cols` of shape `[C*kh*kw, oh*ow]`.
pub(crate) fn im2col<S: Scalar>(x: &[S], p: Plane, win: Window, cols: &mut [S]) {
    let spatial = win.oh * win.ow;
    let mut row = 0;
    for c in 0..p.c {
        let plane = &x[c * p.h * p.w..(c + 1) * p.h * p.w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                let (lo, hi) = valid_range(p.w, win.ow, kj, win.pad, win.stride);
                for oy in 0..win.oh {
                    let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                    let out_row = &mut dst[oy * win.ow..(oy + 1) * win.ow];
                    if iy < 0 || iy >= p.h as isize || lo == hi {
                        out_row.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * p.w..(iy as usize + 1) * p.w];
                    out_row[..lo].fill(S::zero());
                    out_row[hi..].fill(S::zero());
                    let start = lo * win.stride + kj - win.pad;
                    if win.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (v, &s) in out_row[lo..hi].iter_mut().zip(src[start..].iter().step_by(win.stride)) {
                            *v = s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `x`.
pub(crate) fn col2im<S: Scalar>(cols: &[S], p: Plane, win: Window, x: &mut [S]) {
    let spatial = win.oh * win.ow;
    let mut row = 0;
    for c in 0..p.c {
        let plane = &mut x[c * p.h * p.w..(c + 1) * p.h * p.w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let src = &cols[row * spatial..(row + 1) * spatial];
                let (lo, hi) = valid_range(p.w, win.ow, kj, win.pad, win.stride);
                for oy in 0..win.oh {
                    let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                    if iy < 0 || iy >= p.h as isize || lo == hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * p.w..(iy as usize + 1) * p.w];
                    let start = lo * win.stride + kj - win.pad;
                    let src_row = &src[oy * win.ow + lo..oy * win.ow + hi];
                    if win.stride == 1 {
                        for (d, &v) in dst[start..start + (hi - lo)].iter_mut().zip(src_row) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[start..].iter_mut().step_by(win.stride).zip(src_row) {
                            *d += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Geometry of a (transposed) convolution over a batch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub n: usize,
    /// Input sample plane.
    pub input: Plane,
    /// Output sample plane.
    pub output: Plane,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub stride: usize,
}

impl ConvShape {
    /// Window sliding over the conv input, producing the conv output grid.
    fn conv_window(&self) -> Window {
        Window {
            kh: self.kh,
            kw: self.kw,
            pad: self.pad,
            stride: self.stride,
            oh: self.output.h,
            ow: self.output.w,
        }
    }

    /// For a transposed conv the roles flip: the window slides over the
    /// output and lands on the input grid.
    fn deconv_window(&self) -> Window {
        Window {
            kh: self.kh,
            kw: self.kw,
            pad: self.pad,
            stride: self.stride,
            oh: self.input.h,
            ow: self.input.w,
        }
    }
}

fn add_bias<S: Scalar>(out: &mut [S], bias: &[S], spatial: usize) {
    for (chan, &b) in out.chunks_mut(spatial).zip(bias) {
        chan.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<S: Scalar>(dy: &[S], channels: usize, spatial: usize, db: &mut [S]) {
    for sample in dy.chunks(channels * spatial) {
        for (c, chan) in sample.chunks(spatial).enumerate() {
            db[c] += chan.iter().fold(S::zero(), |a, &v| a + v);
        }
    }
}

/// `weight` is `[C_out, C_in, kh, kw]`.
pub(crate) fn conv2d_forward<S: Scalar>(x: &[S], weight: &[S], bias: Option<&[S]>, g: ConvShape) -> Vec<S> {
    let win = g.conv_window();
    let k = g.input.c * g.kh * g.kw;
    let spatial = g.output.h * g.output.w;
    let mut cols = vec![S::zero(); k * spatial];
    let mut out = vec![S::zero(); g.n * g.output.len()];
    for (xs, ys) in x.chunks(g.input.len()).zip(out.chunks_mut(g.output.len())) {
        im2col(xs, g.input, win, &mut cols);
        S::gemm(
            g.output.c,
            k,
            spatial,
            S::one(),
            weight,
            (k as isize, 1),
            &cols,
            (spatial as isize, 1),
            S::zero(),
            ys,
            (spatial as isize, 1),
        );
        if let Some(b) = bias {
            add_bias(ys, b, spatial);
        }
    }
    out
}

pub(crate) struct ConvGrads<S> {
    pub dx: Option<Vec<S>>,
    pub dw: Option<Vec<S>>,
    pub db: Option<Vec<S>>,
}

pub(crate) fn conv2d_backward<S: Scalar>(
    x: &[S],
    weight: &[S],
    dy: &[S],
    g: ConvShape,
    need: (bool, bool, bool),
) -> ConvGrads<S> {
    let win = g.conv_window();
    let k = g.input.c * g.kh * g.kw;
    let spatial = g.output.h * g.output.w;
    let mut cols = vec![S::zero(); k * spatial];
    let mut dx = need.0.then(|| vec![S::zero(); g.n * g.input.len()]);
    let mut dw = need.1.then(|| vec![S::zero(); weight.len()]);
    for s in 0..g.n {
        let dys = &dy[s * g.output.len()..(s + 1) * g.output.len()];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[s * g.input.len()..(s + 1) * g.input.len()], g.input, win, &mut cols);
            // dW += dY * cols^T
            S::gemm(
                g.output.c,
                spatial,
                k,
                S::one(),
                dys,
                (spatial as isize, 1),
                &cols,
                (1, spatial as isize),
                S::one(),
                dw,
                (k as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T * dY
            S::gemm(
                k,
                g.output.c,
                spatial,
                S::one(),
                weight,
                (1, k as isize),
                dys,
                (spatial as isize, 1),
                S::zero(),
                &mut cols,
                (spatial as isize, 1),
            );
            col2im(&cols, g.input, win, &mut dx[s * g.input.len()..(s + 1) * g.input.len()]);
        }
    }
    let db = need.2.then(|| {
        let mut db = vec![S::zero(); g.output.c];
        bias_grad(dy, g.output.c, spatial, &mut db);
        db
    });
    ConvGrads { dx, dw, db }
}

/// `weight` is `[C_in, C_out, kh, kw]`, the same tensor a conv2d mapping
/// `C_out -> C_in` would use; this op is that conv's input adjoint.
pub(crate) fn deconv2d_forward<S: Scalar>(x: &[S], weight: &[S], bias: Option<&[S]>, g: ConvShape) -> Vec<S> {
    let win = g.deconv_window();
    let k = g.output.c * g.kh * g.kw;
    let spatial_in = g.input.h * g.input.w;
    let mut cols = vec![S::zero(); k * spatial_in];
    let mut out = vec![S::zero(); g.n * g.output.len()];
    for (xs, ys) in x.chunks(g.input.len()).zip(out.chunks_mut(g.output.len())) {
        // cols = W^T * x
        S::gemm(
            k,
            g.input.c,
            spatial_in,
            S::one(),
            weight,
            (1, k as isize),
            xs,
            (spatial_in as isize, 1),
            S::zero(),
            &mut cols,
            (spatial_in as isize, 1),
        );
        col2im(&cols, g.output, win, ys);
        if let Some(b) = bias {
            add_bias(ys, b, g.output.h * g.output.w);
        }
    }
    out
}

pub(crate) fn deconv2d_backward<S: Scalar>(
    x: &[S],
    weight: &[S],
    dy: &[S],
    g: ConvShape,
    need: (bool, bool, bool),
) -> ConvGrads<S> {
    let win = g.deconv_window();
    let k = g.output.c * g.kh * g.kw;
    let spatial_in = g.input.h * g.input.w;
    let mut cols = vec![S::zero(); k * spatial_in];
    let mut dx = need.0.then(|| vec![S::zero(); g.n * g.input.len()]);
    let mut dw = need.1.then(|| vec![S::zero(); weight.len()]);
    if need.0 || need.1 {
        for s in 0..g.n {
            im2col(&dy[s * g.output.len()..(s + 1) * g.output.len()], g.output, win, &mut cols);
            if let Some(dx) = dx.as_mut() {
                // dx = W * cols
                S::gemm(
                    g.input.c,
                    k,
                    spatial_in,
                    S::one(),
                    weight,
                    (k as isize, 1),
                    &cols,
                    (spatial_in as isize, 1),
                    S::zero(),
                    &mut dx[s * g.input.len()..(s + 1) * g.input.len()],
                    (spatial_in as isize, 1),
                );
            }
            if let Some(dw) = dw.as_mut() {
                // dW += x * cols^T
                S::gemm(
                    g.input.c,
                    spatial_in,
                    k,
                    S::one(),
                    &x[s * g.input.len()..(s + 1) * g.input.len()],
                    (spatial_in as isize, 1),
                    &cols,
                    (1, spatial_in as isize),
                    S::one(),
                    dw,
                    (k as isize, 1),
                );
            }
        }
    }
    let db = need.2.then(|| {
        let mut db = vec![S::zero(); g.output.c];
        bias_grad(dy, g.output.c, g.output.h * g.output.w, &mut db);
        db
    });
    ConvGrads { dx, dw, db }
}

/// Normalized sampled Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// sample (`d c b | a b c d | c b a`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Separable blur over every `[H, W]` plane in `x`. With `adjoint` the
/// transposed operator is applied instead (scatter through the same taps).
pub(crate) fn blur_planes<S: Scalar>(x: &[S], h: usize, w: usize, kernel: &[S], adjoint: bool) -> Vec<S> {
    let radius = (kernel.len() / 2) as isize;
    let mut out = vec![S::zero(); x.len()];
    let mut tmp = vec![S::zero(); h * w];
    for (src, dst) in x.chunks(h * w).zip(out.chunks_mut(h * w)) {
        tmp.fill(S::zero());
        if !adjoint {
            // rows then columns
            for y in 0..h {
                for xo in 0..w {
                    let mut acc = S::zero();
                    for (t, &kv) in kernel.iter().enumerate() {
                        let xi = reflect_index(xo as isize + t as isize - radius, w);
                        acc += kv * src[y * w + xi];
                    }
                    tmp[y * w + xo] = acc;
                }
            }
            for y in 0..h {
                for xo in 0..w {
                    let mut acc = S::zero();
                    for (t, &kv) in kernel.iter().enumerate() {
                        let yi = reflect_index(y as isize + t as isize - radius, h);
                        acc += kv * tmp[yi * w + xo];
                    }
                    dst[y * w + xo] = acc;
                }
            }
        } else {
            for y in 0..h {
                for xo in 0..w {
                    let g = src[y * w + xo];
                    for (t, &kv) in kernel.iter().enumerate() {
                        let yi = reflect_index(y as isize + t as isize - radius, h);
                        tmp[yi * w + xo] += kv * g;
                    }
                }
            }
            for y in 0..h {
                for xo in 0..w {
                    let g = tmp[y * w + xo];
                    for (t, &kv) in kernel.iter().enumerate() {
                        let xi = reflect_index(xo as isize + t as isize - radius, w);
                        dst[y * w + xi] += kv * g;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_extents_follow_floor_formula() {
        assert_eq!(conv_out_extent(128, 9, 4, 1), Some(128));
        assert_eq!(conv_out_extent(128, 8, 3, 2), Some(64));
        assert_eq!(conv_out_extent(64, 4, 1, 2), Some(32));
        assert_eq!(conv_out_extent(2, 5, 1, 1), None);
    }

    #[test]
    fn deconv_extents_follow_table_rows() {
        assert_eq!(deconv_out_extent(32, 3, 1, 2, 1), Some(64));
        assert_eq!(deconv_out_extent(64, 3, 1, 2, 0), Some(127));
        assert_eq!(deconv_out_extent(127, 10, 4, 1, 0), Some(128));
        assert_eq!(deconv_out_extent(8, 3, 1, 2, 2), None);
    }

    /// Kernel taps whose every output column lands in padding read nothing.
    #[test]
    fn taps_entirely_in_padding_unfold_to_zero() {
        let p = Plane { c: 1, h: 1, w: 1 };
        let win = Window { kh: 2, kw: 2, pad: 1, stride: 3, oh: 1, ow: 1 };
        let mut cols = vec![9.0f64; 4];
        im2col(&[5.0], p, win, &mut cols);
        assert_eq!(cols, [0.0, 0.0, 0.0, 5.0]);
        let mut x = [0.0f64];
        col2im(&[1.0, 2.0, 3.0, 4.0], p, win, &mut x);
        assert_eq!(x, [4.0]);
    }

    #[test]
    fn reflect_without_edge_repeat() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn gaussian_kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(1.8);
        assert_eq!(k.len(), 2 * 6 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..k.len() {
            assert_eq!(k[i], k[k.len() - 1 - i]);
        }
    }
}
