//! Raw numeric kernels over flat row-major buffers. Shape checking happens
//! in the tape; everything here assumes consistent sizes.

/// `c = op(a) · op(b) + beta · c` with `op(a)` of size `m × k` and `op(b)` of
/// size `k × n`. A transposed operand is stored in its transposed layout.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
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

/// Output side of a "same"-padded convolution: `ceil(side / stride)`.
pub fn same_out(side: usize, stride: usize) -> usize {
    side.div_ceil(stride)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize) -> Self {
        ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            out_h: same_out(height, stride),
            out_w: same_out(width, stride),
        }
    }

    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }
}

/// Unfolds one image `[C, H, W]` into columns `[C·k·k, Ho·Wo]`.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let k = g.kernel;
    let pad = g.pad();
    let plane = g.out_h * g.out_w;
    for c in 0..g.channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + kx as isize - pad;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let k = g.kernel;
    let pad = g.pad();
    let plane = g.out_h * g.out_w;
    for c in 0..g.channels {
        let dxc = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dxc[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Dense convolution. `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]`.
pub fn conv2d(x: &[f64], batch: usize, g: &ConvGeom, w: &[f64], out_channels: usize) -> Vec<f64> {
    let in_plane = g.channels * g.height * g.width;
    let plane = g.out_h * g.out_w;
    let patch = g.channels * g.kernel * g.kernel;
    let mut out = vec![0.0; batch * out_channels * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; patch * plane]
    };
    for n in 0..batch {
        let xn = &x[n * in_plane..(n + 1) * in_plane];
        let on = &mut out[n * out_channels * plane..(n + 1) * out_channels * plane];
        if g.is_pointwise() {
            gemm(out_channels, patch, plane, w, false, xn, false, 0.0, on);
        } else {
            im2col(xn, g, &mut cols);
            gemm(out_channels, patch, plane, w, false, &cols, false, 0.0, on);
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to input and weight.
pub fn conv2d_backward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    w: &[f64],
    out_channels: usize,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let in_plane = g.channels * g.height * g.width;
    let plane = g.out_h * g.out_w;
    let patch = g.channels * g.kernel * g.kernel;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; patch * plane]
    };
    let mut dcols = vec![0.0; patch * plane];
    for n in 0..batch {
        let xn = &x[n * in_plane..(n + 1) * in_plane];
        let gn = &dout[n * out_channels * plane..(n + 1) * out_channels * plane];
        let dxn = &mut dx[n * in_plane..(n + 1) * in_plane];
        if g.is_pointwise() {
            gemm(
                out_channels,
                plane,
                patch,
                gn,
                false,
                xn,
                true,
                1.0,
                &mut dw,
            );
            gemm(patch, out_channels, plane, w, true, gn, false, 0.0, dxn);
        } else {
            im2col(xn, g, &mut cols);
            gemm(
                out_channels,
                plane,
                patch,
                gn,
                false,
                &cols,
                true,
                1.0,
                &mut dw,
            );
            gemm(
                patch,
                out_channels,
                plane,
                w,
                true,
                gn,
                false,
                0.0,
                &mut dcols,
            );
            col2im(&dcols, g, dxn);
        }
    }
    (dx, dw)
}

/// Output columns `ox` whose input column `ox·stride + off` lies in `0..side`.
fn valid_range(off: isize, stride: usize, side: usize, out: usize) -> std::ops::Range<usize> {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi = ((side as isize - off) + s - 1)
        .div_euclid(s)
        .clamp(0, out as isize);
    (lo.min(hi) as usize)..(hi as usize)
}

/// Depthwise convolution. `x: [N, C, H, W]`, `w: [C, 1, k, k]`.
pub fn depthwise(x: &[f64], batch: usize, g: &ConvGeom, w: &[f64]) -> Vec<f64> {
    let k = g.kernel;
    let pad = g.pad();
    let in_plane = g.height * g.width;
    let plane = g.out_h * g.out_w;
    let s = g.stride;
    let mut out = vec![0.0; batch * g.channels * plane];
    for n in 0..batch {
        for c in 0..g.channels {
            let xc = &x[(n * g.channels + c) * in_plane..(n * g.channels + c + 1) * in_plane];
            let wc = &w[c * k * k..(c + 1) * k * k];
            let oc = &mut out[(n * g.channels + c) * plane..(n * g.channels + c + 1) * plane];
            for ky in 0..k {
                let ys = valid_range(ky as isize - pad, s, g.height, g.out_h);
                for oy in ys {
                    let iy = oy * s + ky - pad as usize;
                    let row = &xc[iy * g.width..(iy + 1) * g.width];
                    let orow = &mut oc[oy * g.out_w..(oy + 1) * g.out_w];
                    for kx in 0..k {
                        let wv = wc[ky * k + kx];
                        let off = kx as isize - pad;
                        let xs = valid_range(off, s, g.width, g.out_w);
                        if s == 1 {
                            let shift = (xs.start as isize + off) as usize;
                            let len = xs.len();
                            for (o, xv) in orow[xs].iter_mut().zip(&row[shift..shift + len]) {
                                *o += wv * xv;
                            }
                        } else {
                            for ox in xs {
                                orow[ox] += wv * row[(ox * s) + kx - pad as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    w: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let k = g.kernel;
    let pad = g.pad();
    let in_plane = g.height * g.width;
    let plane = g.out_h * g.out_w;
    let s = g.stride;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for n in 0..batch {
        for c in 0..g.channels {
            let base_in = (n * g.channels + c) * in_plane;
            let base_out = (n * g.channels + c) * plane;
            let xc = &x[base_in..base_in + in_plane];
            let dxc = &mut dx[base_in..base_in + in_plane];
            let gc = &dout[base_out..base_out + plane];
            for ky in 0..k {
                let ys = valid_range(ky as isize - pad, s, g.height, g.out_h);
                for kx in 0..k {
                    let wv = w[c * k * k + ky * k + kx];
                    let off = kx as isize - pad;
                    let xs = valid_range(off, s, g.width, g.out_w);
                    let mut acc = 0.0;
                    for oy in ys.clone() {
                        let iy = oy * s + ky - pad as usize;
                        let grow = &gc[oy * g.out_w..(oy + 1) * g.out_w];
                        let xrow = &xc[iy * g.width..(iy + 1) * g.width];
                        let dxrow = &mut dxc[iy * g.width..(iy + 1) * g.width];
                        if s == 1 {
                            let shift = (xs.start as isize + off) as usize;
                            let len = xs.len();
                            for ((gi, xv), d) in grow[xs.clone()]
                                .iter()
                                .zip(&xrow[shift..shift + len])
                                .zip(&mut dxrow[shift..shift + len])
                            {
                                acc += gi * xv;
                                *d += gi * wv;
                            }
                        } else {
                            for ox in xs.clone() {
                                let ix = ox * s + kx - pad as usize;
                                let gi = grow[ox];
                                acc += gi * xrow[ix];
                                dxrow[ix] += gi * wv;
                            }
                        }
                    }
                    dw[c * k * k + ky * k + kx] += acc;
                }
            }
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_halves_with_ceil() {
        assert_eq!(same_out(8, 2), 4);
        assert_eq!(same_out(7, 2), 4);
        assert_eq!(same_out(5, 1), 5);
    }

    fn depthwise_reference(x: &[f64], batch: usize, g: &ConvGeom, w: &[f64]) -> Vec<f64> {
        let (k, pad) = (g.kernel as isize, g.pad());
        let mut out = vec![0.0; batch * g.channels * g.out_h * g.out_w];
        for n in 0..batch {
            for c in 0..g.channels {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * g.stride) as isize + ky - pad;
                                let ix = (ox * g.stride) as isize + kx - pad;
                                if iy >= 0
                                    && ix >= 0
                                    && iy < g.height as isize
                                    && ix < g.width as isize
                                {
                                    let xi = ((n * g.channels + c) * g.height + iy as usize)
                                        * g.width
                                        + ix as usize;
                                    acc += w[(c as isize * k * k + ky * k + kx) as usize] * x[xi];
                                }
                            }
                        }
                        out[((n * g.channels + c) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn depthwise_matches_direct_sum() {
        for (side, kernel, stride) in [(5, 3, 1), (6, 5, 2), (7, 3, 2), (4, 5, 1), (3, 5, 2)] {
            let g = ConvGeom::new(2, side, side, kernel, stride);
            let x: Vec<f64> = (0..2 * 2 * side * side)
                .map(|i| ((i * 7) % 11) as f64 - 5.0)
                .collect();
            let w: Vec<f64> = (0..2 * kernel * kernel)
                .map(|i| ((i * 3) % 5) as f64 - 2.0)
                .collect();
            assert_eq!(depthwise(&x, 2, &g, &w), depthwise_reference(&x, 2, &g, &w));
        }
    }

    #[test]
    fn gemm_transposes_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // a^T stored as 3x2, b^T stored as 2x3
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, 0.0, &mut c2);
        assert_eq!(c, c2);
    }
}
