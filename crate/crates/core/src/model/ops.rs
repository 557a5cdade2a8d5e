//! Dense kernels for the synthesizer: im2col/col2im, GEMM, strided 2-D
//! convolution and its transpose, with their adjoints.
//!
//! Activations are `[channels, height, width]` row-major slices; height is
//! the time axis and width the frequency axis.

/// Spatial extent of a CHW activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Kernel geometry shared by a convolution and its transpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    /// Output extent of a strided convolution over `n` input positions.
    pub fn conv_out(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Output extent of the transposed convolution over `n` input positions.
    pub fn tconv_out(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.kernel - 2 * self.pad
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape `m x k` and
/// `op(b)` of shape `k x n`; all matrices row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every element addressed by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Unfolds `x` (`big` extent) into columns for every position of the `small`
/// grid: `cols[(ci, ky, kx), (oy, ox)] = x[ci, oy*s - p + ky, ox*s - p + kx]`.
pub fn im2col(x: &[f64], big: Dims, small_h: usize, small_w: usize, g: Geometry, cols: &mut [f64]) {
    let k = g.kernel;
    let plane = small_h * small_w;
    debug_assert_eq!(cols.len(), big.c * k * k * plane);
    for ci in 0..big.c {
        let src = &x[ci * big.plane()..(ci + 1) * big.plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..small_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out = &mut dst[oy * small_w..(oy + 1) * small_w];
                    if iy < 0 || iy >= big.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * big.w..(iy as usize + 1) * big.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix >= 0 && (ix as usize) < big.w {
                            src_row[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back and accumulates into `x`.
pub fn col2im(cols: &[f64], big: Dims, small_h: usize, small_w: usize, g: Geometry, x: &mut [f64]) {
    let k = g.kernel;
    let plane = small_h * small_w;
    debug_assert_eq!(cols.len(), big.c * k * k * plane);
    for ci in 0..big.c {
        let dst = &mut x[ci * big.plane()..(ci + 1) * big.plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..small_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= big.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * big.w..(iy as usize + 1) * big.w];
                    for (ox, &v) in src[oy * small_w..(oy + 1) * small_w].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < big.w {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(y: &mut [f64], bias: &[f64], plane: usize) {
    for (ch, &b) in y.chunks_mut(plane).zip(bias) {
        ch.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_bias_grad(gy: &[f64], gb: &mut [f64], plane: usize) {
    for (ch, g) in gy.chunks(plane).zip(gb.iter_mut()) {
        *g += ch.iter().sum::<f64>();
    }
}

/// Strided convolution. `weight` is `[cout, cin, k, k]`. Returns the output
/// and its extent; `cols` receives the unfolded input for the backward pass.
pub fn conv2d_forward(
    x: &[f64],
    xd: Dims,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    g: Geometry,
    cols: &mut Vec<f64>,
) -> (Vec<f64>, Dims) {
    let yd = Dims::new(cout, g.conv_out(xd.h), g.conv_out(xd.w));
    let kk = xd.c * g.kernel * g.kernel;
    cols.resize(kk * yd.plane(), 0.0);
    im2col(x, xd, yd.h, yd.w, g, cols);
    let mut y = vec![0.0; yd.len()];
    gemm(cout, kk, yd.plane(), 1.0, weight, false, cols, false, 0.0, &mut y);
    add_bias(&mut y, bias, yd.plane());
    (y, yd)
}

/// Backward of [`conv2d_forward`]; accumulates weight/bias gradients and
/// returns the input gradient when `need_input_grad`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    gy: &[f64],
    yd: Dims,
    xd: Dims,
    weight: &[f64],
    cols: &[f64],
    g: Geometry,
    gw: &mut [f64],
    gb: &mut [f64],
    need_input_grad: bool,
) -> Option<Vec<f64>> {
    let kk = xd.c * g.kernel * g.kernel;
    gemm(yd.c, yd.plane(), kk, 1.0, gy, false, cols, true, 1.0, gw);
    accumulate_bias_grad(gy, gb, yd.plane());
    if !need_input_grad {
        return None;
    }
    let mut gcols = vec![0.0; kk * yd.plane()];
    gemm(kk, yd.c, yd.plane(), 1.0, weight, true, gy, false, 0.0, &mut gcols);
    let mut gx = vec![0.0; xd.len()];
    col2im(&gcols, xd, yd.h, yd.w, g, &mut gx);
    Some(gx)
}

/// Transposed convolution. `weight` is `[cin, cout, k, k]`.
pub fn tconv2d_forward(
    x: &[f64],
    xd: Dims,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    g: Geometry,
) -> (Vec<f64>, Dims) {
    let yd = Dims::new(cout, g.tconv_out(xd.h), g.tconv_out(xd.w));
    let kk = cout * g.kernel * g.kernel;
    let mut cols = vec![0.0; kk * xd.plane()];
    gemm(kk, xd.c, xd.plane(), 1.0, weight, true, x, false, 0.0, &mut cols);
    let mut y = vec![0.0; yd.len()];
    col2im(&cols, yd, xd.h, xd.w, g, &mut y);
    add_bias(&mut y, bias, yd.plane());
    (y, yd)
}

/// Backward of [`tconv2d_forward`].
#[allow(clippy::too_many_arguments)]
pub fn tconv2d_backward(
    gy: &[f64],
    yd: Dims,
    x: &[f64],
    xd: Dims,
    weight: &[f64],
    g: Geometry,
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let kk = yd.c * g.kernel * g.kernel;
    let mut gcols = vec![0.0; kk * xd.plane()];
    im2col(gy, yd, xd.h, xd.w, g, &mut gcols);
    gemm(xd.c, xd.plane(), kk, 1.0, x, false, &gcols, true, 1.0, gw);
    accumulate_bias_grad(gy, gb, yd.plane());
    let mut gx = vec![0.0; xd.len()];
    gemm(xd.c, kk, xd.plane(), 1.0, weight, false, &gcols, false, 0.0, &mut gx);
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const G: Geometry = Geometry {
        kernel: 4,
        stride: 2,
        pad: 1,
    };

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &[f64], xd: Dims, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
        let (oh, ow) = (G.conv_out(xd.h), G.conv_out(xd.w));
        let mut y = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..xd.c {
                        for ky in 0..4 {
                            for kx in 0..4 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < xd.h && (ix as usize) < xd.w {
                                    acc += w[((co * xd.c + ci) * 4 + ky) * 4 + kx]
                                        * x[(ci * xd.h + iy as usize) * xd.w + ix as usize];
                                }
                            }
                        }
                    }
                    y[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        y
    }

    /// Direct scatter form of the transposed convolution.
    fn naive_tconv(x: &[f64], xd: Dims, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
        let (oh, ow) = (G.tconv_out(xd.h), G.tconv_out(xd.w));
        let mut y = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            y[co * oh * ow..(co + 1) * oh * ow].iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..xd.c {
            for iy in 0..xd.h {
                for ix in 0..xd.w {
                    let v = x[(ci * xd.h + iy) * xd.w + ix];
                    for co in 0..cout {
                        for ky in 0..4 {
                            for kx in 0..4 {
                                let oy = (iy * 2 + ky) as isize - 1;
                                let ox = (ix * 2 + kx) as isize - 1;
                                if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                    y[(co * oh + oy as usize) * ow + ox as usize] +=
                                        v * w[((ci * cout + co) * 4 + ky) * 4 + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xd = Dims::new(3, 8, 10);
        let x = rand_vec(xd.len(), &mut rng);
        let w = rand_vec(5 * 3 * 16, &mut rng);
        let b = rand_vec(5, &mut rng);
        let mut cols = Vec::new();
        let (y, yd) = conv2d_forward(&x, xd, &w, &b, 5, G, &mut cols);
        assert_eq!(yd, Dims::new(5, 4, 5));
        for (a, e) in y.iter().zip(naive_conv(&x, xd, &w, &b, 5)) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn tconv_matches_naive_and_doubles_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xd = Dims::new(4, 3, 5);
        let x = rand_vec(xd.len(), &mut rng);
        let w = rand_vec(4 * 2 * 16, &mut rng);
        let b = rand_vec(2, &mut rng);
        let (y, yd) = tconv2d_forward(&x, xd, &w, &b, 2, G);
        assert_eq!(yd, Dims::new(2, 6, 10));
        for (a, e) in y.iter().zip(naive_tconv(&x, xd, &w, &b, 2)) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let big = Dims::new(2, 6, 8);
        let (sh, sw) = (3, 4);
        let x = rand_vec(big.len(), &mut rng);
        let c = rand_vec(2 * 16 * sh * sw, &mut rng);
        let mut cols = vec![0.0; c.len()];
        im2col(&x, big, sh, sw, G, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; big.len()];
        col2im(&c, big, sh, sw, G, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn gemm_transposes() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // a^T stored as 3x2 gives the same product.
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, 1.0, &at, true, &bt, true, 0.0, &mut c2);
        assert_eq!(c2, c);
    }
}
