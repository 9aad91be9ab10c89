//! Matrix multiply and patch (un)folding for convolutions.

/// `c = op(a) · op(b) + beta · c` for row-major matrices.
///
/// `op(a)` is `m × k` and `op(b)` is `k × n`. When `trans_a` is set, `a` is
/// stored as `k × m`; likewise `b` as `n × k` under `trans_b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every slice to the extent implied by the
    // dimensions and strides, so all accesses stay in bounds.
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

/// Geometry of a strided, zero-padded square-kernel convolution.
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
    /// Output spatial size, or `None` when the kernel does not fit.
    pub fn output(&self) -> Option<(usize, usize)> {
        if self.stride == 0 || self.kernel == 0 {
            return None;
        }
        let h = self.height + 2 * self.pad;
        let w = self.width + 2 * self.pad;
        if h < self.kernel || w < self.kernel {
            return None;
        }
        Some((
            (h - self.kernel) / self.stride + 1,
            (w - self.kernel) / self.stride + 1,
        ))
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn out(&self) -> (usize, usize) {
        self.output().expect("invalid convolution geometry")
    }
}

/// Unfolds one CHW image into rows of patches: `[out_h * out_w, C * K * K]`.
pub fn im2col(img: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let (oh, ow) = g.out();
    let k = g.kernel;
    let plen = g.patch_len();
    debug_assert_eq!(img.len(), g.channels * g.height * g.width);
    debug_assert_eq!(cols.len(), oh * ow * plen);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * plen..(oy * ow + ox + 1) * plen];
            let y0 = (oy * g.stride) as isize - g.pad as isize;
            let x0 = (ox * g.stride) as isize - g.pad as isize;
            for c in 0..g.channels {
                let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
                for ky in 0..k {
                    let y = y0 + ky as isize;
                    let dst = &mut row[(c * k + ky) * k..(c * k + ky + 1) * k];
                    if y < 0 || y >= g.height as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let line = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (kx, d) in dst.iter_mut().enumerate() {
                        let x = x0 + kx as isize;
                        *d = if x < 0 || x >= g.width as isize {
                            0.0
                        } else {
                            line[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch rows back, accumulating into `img`.
pub fn col2im(cols: &[f32], g: &ConvGeom, img: &mut [f32]) {
    let (oh, ow) = g.out();
    let k = g.kernel;
    let plen = g.patch_len();
    debug_assert_eq!(img.len(), g.channels * g.height * g.width);
    debug_assert_eq!(cols.len(), oh * ow * plen);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * plen..(oy * ow + ox + 1) * plen];
            let y0 = (oy * g.stride) as isize - g.pad as isize;
            let x0 = (ox * g.stride) as isize - g.pad as isize;
            for c in 0..g.channels {
                let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
                for ky in 0..k {
                    let y = y0 + ky as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let src = &row[(c * k + ky) * k..(c * k + ky + 1) * k];
                    let line = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (kx, s) in src.iter().enumerate() {
                        let x = x0 + kx as isize;
                        if x >= 0 && x < g.width as isize {
                            line[x as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_all_transpose_combinations() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let expected = [4.0, 5.0, 10.0, 11.0];
        for (lhs, ta) in [(&a, false), (&at, true)] {
            for (rhs, tb) in [(&b, false), (&bt, true)] {
                let mut c = [0.0; 4];
                gemm(2, 3, 2, lhs, ta, rhs, tb, 0.0, &mut c);
                assert_eq!(c, expected, "trans_a={ta} trans_b={tb}");
            }
        }
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        let g = ConvGeom {
            channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let (oh, ow) = g.output().unwrap();
        let img: Vec<f32> = (0..40).map(|i| (i as f32 * 0.37).sin()).collect();
        let cols_probe: Vec<f32> = (0..oh * ow * g.patch_len())
            .map(|i| (i as f32 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; cols_probe.len()];
        im2col(&img, &g, &mut cols);
        let mut back = vec![0.0; img.len()];
        col2im(&cols_probe, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&cols_probe).map(|(a, b)| (a * b) as f64).sum();
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }
}
