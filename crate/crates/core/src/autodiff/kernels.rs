//! Forward and backward kernels behind the tape ops. Plain slices in, plain slices out.

use crate::tensor::Shape;

/// Row-major `c = op(a) · op(b) + beta · c` where `op(a)` is `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above bound every index touched for the given strides.
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

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col(input: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.channels {
        let src = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeometry, dinput: &mut [f64]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.channels {
        let dst = &mut dinput[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    input: &[f64],
    batch: usize,
    weight: &[f64],
    bias: &[f64],
    g: &ConvGeometry,
) -> Vec<f64> {
    let in_len = g.channels * g.height * g.width;
    let out_len = g.out_channels * g.out_plane();
    let mut out = vec![0.0; batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.patch_len() * g.out_plane()]
    };
    for b in 0..batch {
        let x = &input[b * in_len..(b + 1) * in_len];
        let y = &mut out[b * out_len..(b + 1) * out_len];
        for (oc, chunk) in y.chunks_mut(g.out_plane()).enumerate() {
            chunk.fill(bias[oc]);
        }
        let patches: &[f64] = if g.is_pointwise() {
            x
        } else {
            im2col(x, g, &mut cols);
            &cols
        };
        gemm(
            g.out_channels,
            g.patch_len(),
            g.out_plane(),
            weight,
            false,
            patches,
            false,
            1.0,
            y,
        );
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    input: &[f64],
    batch: usize,
    weight: &[f64],
    grad_out: &[f64],
    g: &ConvGeometry,
    need_input: bool,
) -> ConvGrads {
    let in_len = g.channels * g.height * g.width;
    let out_len = g.out_channels * g.out_plane();
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; g.out_channels];
    let mut dinput = need_input.then(|| vec![0.0; batch * in_len]);
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![0.0; g.patch_len() * g.out_plane()]
    };
    let mut dcols = vec![0.0; g.patch_len() * g.out_plane()];
    for b in 0..batch {
        let x = &input[b * in_len..(b + 1) * in_len];
        let gy = &grad_out[b * out_len..(b + 1) * out_len];
        for (oc, chunk) in gy.chunks(g.out_plane()).enumerate() {
            db[oc] += chunk.iter().sum::<f64>();
        }
        let patches: &[f64] = if pointwise {
            x
        } else {
            im2col(x, g, &mut cols);
            &cols
        };
        gemm(
            g.out_channels,
            g.out_plane(),
            g.patch_len(),
            gy,
            false,
            patches,
            true,
            1.0,
            &mut dw,
        );
        if let Some(dx) = dinput.as_mut() {
            let dx = &mut dx[b * in_len..(b + 1) * in_len];
            gemm(
                g.patch_len(),
                g.out_channels,
                g.out_plane(),
                weight,
                true,
                gy,
                false,
                0.0,
                &mut dcols,
            );
            if pointwise {
                for (d, c) in dx.iter_mut().zip(&dcols) {
                    *d += c;
                }
            } else {
                col2im_add(&dcols, g, dx);
            }
        }
    }
    ConvGrads {
        input: dinput,
        weight: dw,
        bias: db,
    }
}

/// Source index for nearest-neighbour resampling of `out_len` samples from `in_len`.
#[inline]
pub(crate) fn nearest_source(i: usize, in_len: usize, out_len: usize) -> usize {
    i * in_len / out_len
}

pub(crate) fn resize_nearest_forward(input: &[f64], from: Shape, to: Shape) -> Vec<f64> {
    let mut out = Vec::with_capacity(to.numel());
    for plane in input.chunks(from.plane()) {
        for y in 0..to.height {
            let sy = nearest_source(y, from.height, to.height);
            for x in 0..to.width {
                let sx = nearest_source(x, from.width, to.width);
                out.push(plane[sy * from.width + sx]);
            }
        }
    }
    out
}

pub(crate) fn resize_nearest_backward(grad_out: &[f64], from: Shape, to: Shape) -> Vec<f64> {
    let mut dx = vec![0.0; from.numel()];
    for (dplane, gplane) in dx.chunks_mut(from.plane()).zip(grad_out.chunks(to.plane())) {
        for y in 0..to.height {
            let sy = nearest_source(y, from.height, to.height);
            for x in 0..to.width {
                let sx = nearest_source(x, from.width, to.width);
                dplane[sy * from.width + sx] += gplane[y * to.width + x];
            }
        }
    }
    dx
}

/// Windowed max; returns values and the flat input index of each window's maximum.
/// Ties resolve to the first element in row-major window order.
pub(crate) fn max_pool_forward(
    input: &[f64],
    from: Shape,
    to: Shape,
    k: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(to.numel());
    let mut argmax = Vec::with_capacity(to.numel());
    for (p, plane) in input.chunks(from.plane()).enumerate() {
        let base = p * from.plane();
        for oy in 0..to.height {
            for ox in 0..to.width {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = (oy * stride + ky) * from.width + ox * stride + kx;
                        let v = plane[idx];
                        if best_idx == usize::MAX || v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(base + best_idx);
            }
        }
    }
    (out, argmax)
}
