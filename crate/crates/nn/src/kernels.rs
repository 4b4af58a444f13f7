//! Raw slice kernels behind the graph ops. Layout is NCHW throughout.

/// `c = alpha * a·b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
    rsc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices that cover the strided extents; the
    // debug asserts check the furthest element touched.
    debug_assert!(a.len() as isize > (m as isize - 1) * rsa + (k as isize - 1).max(0) * csa);
    debug_assert!(b.len() as isize > (k as isize - 1).max(0) * rsb + (n as isize - 1) * csb);
    debug_assert!(c.len() as isize > (m as isize - 1) * rsc + (n as isize - 1));
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
            rsc,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds one image `[c_in, h, w]` into `[c_in*k*k, h_out*w_out]`.
pub(crate) fn im2col(img: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let cols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
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

/// Adjoint of [`im2col`]: scatters-adds columns back into an image buffer.
pub(crate) fn col2im_add(col: &[f32], g: &ConvGeom, img: &mut [f32]) {
    let cols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of a batch. `weight` is `[c_out, c_in, k, k]`.
pub(crate) fn conv2d_forward(
    x: &[f32],
    n: usize,
    g: &ConvGeom,
    weight: &[f32],
    c_out: usize,
    bias: Option<&[f32]>,
    out: &mut [f32],
) {
    let rows = g.col_rows();
    let cols = g.col_cols();
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = c_out * cols;
    let mut col = vec![0.0f32; rows * cols];
    for b in 0..n {
        let img = &x[b * in_stride..(b + 1) * in_stride];
        let y = &mut out[b * out_stride..(b + 1) * out_stride];
        let beta = match bias {
            Some(bias) => {
                for (co, chunk) in y.chunks_mut(cols).enumerate() {
                    chunk.fill(bias[co]);
                }
                1.0
            }
            None => 0.0,
        };
        if g.k == 1 && g.stride == 1 && g.pad == 0 {
            gemm(c_out, rows, cols, weight, (rows as isize, 1), img, (cols as isize, 1), beta, y, cols as isize);
        } else {
            im2col(img, g, &mut col);
            gemm(c_out, rows, cols, weight, (rows as isize, 1), &col, (cols as isize, 1), beta, y, cols as isize);
        }
    }
}

/// Accumulates input, weight and bias gradients of a batched convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f32],
    n: usize,
    g: &ConvGeom,
    weight: &[f32],
    c_out: usize,
    dy: &[f32],
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
    mut db: Option<&mut [f32]>,
) {
    let rows = g.col_rows();
    let cols = g.col_cols();
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = c_out * cols;
    let pointwise = g.k == 1 && g.stride == 1 && g.pad == 0;
    let mut col = vec![0.0f32; rows * cols];
    let mut dcol = vec![0.0f32; rows * cols];
    for b in 0..n {
        let dyb = &dy[b * out_stride..(b + 1) * out_stride];
        if let Some(db) = db.as_deref_mut() {
            for (co, chunk) in dyb.chunks(cols).enumerate() {
                db[co] += chunk.iter().sum::<f32>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let img = &x[b * in_stride..(b + 1) * in_stride];
            let src: &[f32] = if pointwise {
                img
            } else {
                im2col(img, g, &mut col);
                &col
            };
            // dW[c_out, rows] += dY[c_out, cols] · colᵀ[cols, rows]
            gemm(c_out, cols, rows, dyb, (cols as isize, 1), src, (1, cols as isize), 1.0, dw, rows as isize);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dimg = &mut dx[b * in_stride..(b + 1) * in_stride];
            if pointwise {
                gemm(rows, c_out, cols, weight, (1, rows as isize), dyb, (cols as isize, 1), 1.0, dimg, cols as isize);
            } else {
                // dcol[rows, cols] = Wᵀ[rows, c_out] · dY[c_out, cols]
                gemm(rows, c_out, cols, weight, (1, rows as isize), dyb, (cols as isize, 1), 0.0, &mut dcol, cols as isize);
                col2im_add(&dcol, g, dimg);
            }
        }
    }
}

pub(crate) fn upsample2x(x: &[f32], planes: usize, h: usize, w: usize, out: &mut [f32]) {
    let (h2, w2) = (2 * h, 2 * w);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            let drow = &mut dst[y * w2..(y + 1) * w2];
            for (xo, d) in drow.iter_mut().enumerate() {
                *d = srow[xo / 2];
            }
        }
    }
}

pub(crate) fn upsample2x_backward(dy: &[f32], planes: usize, h: usize, w: usize, dx: &mut [f32]) {
    let (h2, w2) = (2 * h, 2 * w);
    for p in 0..planes {
        let src = &dy[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            let srow = &src[y * w2..(y + 1) * w2];
            let drow = &mut dst[(y / 2) * w..(y / 2 + 1) * w];
            for (xo, s) in srow.iter().enumerate() {
                drow[xo / 2] += *s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f32], g: &ConvGeom, w: &[f32], c_out: usize) -> Vec<f32> {
        let mut out = vec![0.0; c_out * g.h_out * g.w_out];
        for co in 0..c_out {
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = 0.0;
                    for ci in 0..g.c_in {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += x[(ci * g.h + iy as usize) * g.w + ix as usize]
                                    * w[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                            }
                        }
                    }
                    out[(co * g.h_out + oy) * g.w_out + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            let g = ConvGeom::new(2, 7, 6, k, stride, pad).unwrap();
            let x: Vec<f32> = (0..2 * 7 * 6).map(|i| ((i * 37) % 11) as f32 - 5.0).collect();
            let w: Vec<f32> = (0..3 * 2 * k * k).map(|i| ((i * 13) % 7) as f32 * 0.1 - 0.3).collect();
            let mut out = vec![0.0; 3 * g.h_out * g.w_out];
            conv2d_forward(&x, 1, &g, &w, 3, None, &mut out);
            let want = naive_conv(&x, &g, &w, 3);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 5, 5, 3, 2, 1).unwrap();
        let x: Vec<f32> = (0..50).map(|i| (i as f32 * 0.37).sin()).collect();
        let c: Vec<f32> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut col = vec![0.0; c.len()];
        im2col(&x, &g, &mut col);
        let lhs: f32 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_add(&c, &g, &mut back);
        let rhs: f32 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
