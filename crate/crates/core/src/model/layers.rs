//! Dense and convolution kernels over flat `f64` buffers.
//!
//! Activation maps are channel-major `[C][H][W]`. Convolutions are 3x3 with
//! padding 1 and go through im2col plus a single GEMM.

/// `c[m x n] = alpha * op(a) * op(b) + beta * c`, all row-major with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers size every buffer for the given dimensions and strides.
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseShape {
    pub inp: usize,
    pub out: usize,
}

/// `y = W x + b` with `W` stored `[out][inp]`.
pub fn dense_forward(s: DenseShape, w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
    for o in 0..s.out {
        let row = &w[o * s.inp..(o + 1) * s.inp];
        y[o] = b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Accumulates parameter gradients and writes `dx` (when requested).
pub fn dense_backward(
    s: DenseShape,
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    for o in 0..s.out {
        let g = dy[o];
        db[o] += g;
        if g != 0.0 {
            let row = &mut dw[o * s.inp..(o + 1) * s.inp];
            for (r, xi) in row.iter_mut().zip(x) {
                *r += g * xi;
            }
        }
    }
    if let Some(dx) = dx {
        dx.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..s.out {
            let g = dy[o];
            if g != 0.0 {
                for (d, wi) in dx.iter_mut().zip(&w[o * s.inp..(o + 1) * s.inp]) {
                    *d += g * wi;
                }
            }
        }
    }
}

pub fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the post-activation output was clipped.
pub fn relu_backward(out: &[f64], grad: &mut [f64]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_c: usize,
    pub out_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub stride: usize,
}

pub const KERNEL: usize = 3;
const PAD: isize = 1;

impl ConvShape {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * PAD as usize - KERNEL) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * PAD as usize - KERNEL) / self.stride + 1
    }

    /// Rows of the im2col matrix.
    pub fn patch(&self) -> usize {
        self.in_c * KERNEL * KERNEL
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn weights(&self) -> usize {
        self.out_c * self.patch()
    }
}

/// Fills `cols[patch][positions]` from the `[C][H][W]` input.
pub fn im2col(s: ConvShape, x: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let p = oh * ow;
    for c in 0..s.in_c {
        let plane = &x[c * s.in_h * s.in_w..(c + 1) * s.in_h * s.in_w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * s.stride) as isize + ky as isize - PAD;
                    for ox in 0..ow {
                        let ix = (ox * s.stride) as isize + kx as isize - PAD;
                        dst[oy * ow + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < s.in_h
                            && (ix as usize) < s.in_w
                        {
                            plane[iy as usize * s.in_w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Scatters `dcols` back onto the input gradient (which is overwritten).
pub fn col2im(s: ConvShape, dcols: &[f64], dx: &mut [f64]) {
    dx.iter_mut().for_each(|v| *v = 0.0);
    let (oh, ow) = (s.out_h(), s.out_w());
    let p = oh * ow;
    for c in 0..s.in_c {
        let plane = &mut dx[c * s.in_h * s.in_w..(c + 1) * s.in_h * s.in_w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let src = &dcols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * s.stride) as isize + ky as isize - PAD;
                    if iy < 0 || iy as usize >= s.in_h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * s.stride) as isize + kx as isize - PAD;
                        if ix >= 0 && (ix as usize) < s.in_w {
                            plane[iy as usize * s.in_w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y[out_c][positions] = W[out_c][patch] * cols + b`.
pub fn conv_forward(s: ConvShape, w: &[f64], b: &[f64], cols: &[f64], y: &mut [f64]) {
    let p = s.positions();
    let k = s.patch();
    for (o, &bias) in b.iter().enumerate().take(s.out_c) {
        y[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = bias);
    }
    gemm(
        s.out_c,
        k,
        p,
        w,
        (k as isize, 1),
        cols,
        (p as isize, 1),
        1.0,
        y,
    );
}

/// Accumulates `dw`, `db`; writes `dcols` when requested.
pub fn conv_backward(
    s: ConvShape,
    w: &[f64],
    cols: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dcols: Option<&mut [f64]>,
) {
    let p = s.positions();
    let k = s.patch();
    for o in 0..s.out_c {
        db[o] += dy[o * p..(o + 1) * p].iter().sum::<f64>();
    }
    // dW += dY * cols^T
    gemm(
        s.out_c,
        p,
        k,
        dy,
        (p as isize, 1),
        cols,
        (1, p as isize),
        1.0,
        dw,
    );
    if let Some(dcols) = dcols {
        // dcols = W^T * dY
        gemm(
            k,
            s.out_c,
            p,
            w,
            (1, k as isize),
            dy,
            (p as isize, 1),
            0.0,
            dcols,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn conv_naive(s: ConvShape, w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        let (oh, ow) = (s.out_h(), s.out_w());
        let mut y = vec![0.0; s.out_c * oh * ow];
        for o in 0..s.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for c in 0..s.in_c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * s.stride + ky) as isize - 1;
                                let ix = (ox * s.stride + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy as usize >= s.in_h || ix as usize >= s.in_w {
                                    continue;
                                }
                                acc += w[((o * s.in_c + c) * 3 + ky) * 3 + kx]
                                    * x[(c * s.in_h + iy as usize) * s.in_w + ix as usize];
                            }
                        }
                    }
                    y[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        (0..n)
            .map(|i| (((i as u64 + 1) * 2654435761 ^ seed) % 1000) as f64 / 500.0 - 1.0)
            .collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (stride, h, w) in [(2, 8, 8), (1, 5, 7), (2, 7, 5)] {
            let s = ConvShape {
                in_c: 3,
                out_c: 4,
                in_h: h,
                in_w: w,
                stride,
            };
            let wt = pseudo(s.weights(), 1);
            let b = pseudo(4, 2);
            let x = pseudo(3 * h * w, 3);
            let mut cols = vec![0.0; s.patch() * s.positions()];
            im2col(s, &x, &mut cols);
            let mut y = vec![0.0; 4 * s.positions()];
            conv_forward(s, &wt, &b, &cols, &mut y);
            let want = conv_naive(s, &wt, &b, &x);
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let s = ConvShape {
            in_c: 2,
            out_c: 1,
            in_h: 6,
            in_w: 6,
            stride: 2,
        };
        let x = pseudo(72, 5);
        let g = pseudo(s.patch() * s.positions(), 6);
        let mut cols = vec![0.0; g.len()];
        im2col(s, &x, &mut cols);
        let mut dx = vec![0.0; 72];
        col2im(s, &g, &mut dx);
        let lhs: f64 = cols.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn dense_round_numbers() {
        let s = DenseShape { inp: 2, out: 2 };
        let w = [1.0, 2.0, 3.0, 4.0];
        let mut y = [0.0; 2];
        dense_forward(s, &w, &[0.5, -0.5], &[1.0, 1.0], &mut y);
        assert_eq!(y, [3.5, 6.5]);
    }
}
