//! Slice-level kernels shared by the graph ops. No shape checking happens
//! here; callers validate extents before dispatching.

/// `c = a · b + beta · c` where `a` is logically `m×k` and `b` is `k×n`.
/// `a_t`/`b_t` mean the operand is stored transposed (`k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the bounds assert above guarantees every (row, col) addressed
    // through the given strides lies inside the three slices.
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

/// Output extent of a convolution along one axis, or `None` when the padded
/// input is smaller than the kernel.
pub(crate) fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Unfolds one `[c,h,w]` image into `[c·kh·kw, ho·wo]` columns.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let xrow = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            xrow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into `dx` (accumulating).
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        let xc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            xc[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel 2-D convolution of one `[h,w]` plane into `[ho,wo]`.
pub(crate) fn dw_plane_forward(x: &[f64], k: &[f64], bias: f64, g: &ConvGeom, out: &mut [f64]) {
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let mut acc = bias;
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let xrow = &x[iy as usize * g.w..];
                let krow = &k[ky * g.kw..(ky + 1) * g.kw];
                for (kx, kv) in krow.iter().enumerate() {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix >= 0 && (ix as usize) < g.w {
                        acc += kv * xrow[ix as usize];
                    }
                }
            }
            out[oy * g.wo + ox] = acc;
        }
    }
}

/// Backward of [`dw_plane_forward`]: accumulates into `dx` and `dk`, returns
/// the bias gradient.
pub(crate) fn dw_plane_backward(
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
) -> f64 {
    let mut dx = dx;
    let mut dk = dk;
    let mut db = 0.0;
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let gv = dy[oy * g.wo + ox];
            db += gv;
            if gv == 0.0 {
                continue;
            }
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let xi = iy as usize * g.w + ix as usize;
                    if let Some(dx) = dx.as_deref_mut() {
                        dx[xi] += gv * k[ky * g.kw + kx];
                    }
                    if let Some(dk) = dk.as_deref_mut() {
                        dk[ky * g.kw + kx] += gv * x[xi];
                    }
                }
            }
        }
    }
    db
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // aᵀ·b with a stored as-is
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 1.0, &mut c);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }

    #[test]
    fn conv_out_floor() {
        assert_eq!(conv_out(224, 3, 2, 1), Some(112));
        assert_eq!(conv_out(14, 3, 2, 1), Some(7));
        assert_eq!(conv_out(7, 3, 2, 1), Some(4));
        assert_eq!(conv_out(1, 5, 1, 1), None);
    }
}
