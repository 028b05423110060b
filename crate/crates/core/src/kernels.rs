//! Numeric kernels behind the differentiable ops. Everything here works on
//! plain slices; the tape in [`crate::autodiff`] decides what to call.
//!
//! Convolutions of every rank are lowered to a 3D geometry (2D images use a
//! unit depth) and computed as im2col followed by GEMM.

use crate::error::{shape_mismatch, Result};
use crate::tensor::Real;

/// `c = a * b + beta * c` on strided row/column views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<R: Real>(
    (m, k, n): (usize, usize, usize),
    a: &[R],
    (rsa, csa): (usize, usize),
    b: &[R],
    (rsb, csb): (usize, usize),
    beta: R,
    c: &mut [R],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rs: usize, cs: usize, rows: usize, cols: usize| {
        (rows.saturating_sub(1)) * rs + (cols.saturating_sub(1)) * cs
    };
    if k > 0 {
        assert!(last(rsa, csa, m, k) < a.len(), "gemm: a out of bounds");
        assert!(last(rsb, csb, k, n) < b.len(), "gemm: b out of bounds");
    }
    assert!(last(rsc, csc, m, n) < c.len(), "gemm: c out of bounds");
    // SAFETY: extents were bounds-checked above and `c` is a unique borrow.
    unsafe {
        R::gemm_raw(
            m,
            k,
            n,
            R::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a (possibly degenerate-depth) 3D cross-correlation from a
/// `[c_in, d, h, w]` volume to a `[c_out, od, oh, ow]` volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        c_out: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for ax in 0..3 {
            if stride[ax] == 0 || kernel[ax] == 0 {
                return Err(shape_mismatch("stride and kernel extents must be >= 1"));
            }
            let span = input[ax] + 2 * pad[ax];
            if span < kernel[ax] {
                return Err(shape_mismatch(format!(
                    "kernel extent {} exceeds padded input extent {span} on axis {ax}",
                    kernel[ax]
                )));
            }
            output[ax] = (span - kernel[ax]) / stride[ax] + 1;
        }
        Ok(Self {
            c_in,
            c_out,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    /// Geometry of the convolution whose adjoint is a transposed convolution
    /// from `[c_in_t, input]` to `[c_out_t, output]`.
    pub fn for_transpose(
        c_in_t: usize,
        c_out_t: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut full = [0; 3];
        for ax in 0..3 {
            if stride[ax] == 0 {
                return Err(shape_mismatch("stride must be >= 1"));
            }
            let grown = (input[ax] - 1) * stride[ax] + kernel[ax];
            if grown <= 2 * pad[ax] {
                return Err(shape_mismatch(format!(
                    "transposed convolution output would be empty on axis {ax}"
                )));
            }
            full[ax] = grown - 2 * pad[ax];
        }
        let geom = Self::new(c_out_t, c_in_t, full, kernel, stride, pad)?;
        debug_assert_eq!(geom.output, input);
        Ok(geom)
    }

    pub fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel_volume()
    }
}

/// Unfold one `[c_in, d, h, w]` sample into `[c_in*kd*kh*kw, od*oh*ow]`.
pub(crate) fn im2col<R: Real>(g: &ConvGeom, x: &[R], cols: &mut [R]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let p = g.out_volume();
    let mut row = 0;
    for c in 0..g.c_in {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            for bb in 0..kh {
                for cc in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for z in 0..od {
                        let iz = (z * sd + a) as isize - pd as isize;
                        for y in 0..oh {
                            let iy = (y * sh + bb) as isize - ph as isize;
                            let out = &mut dst[idx..idx + ow];
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                out.iter_mut().for_each(|v| *v = R::zero());
                            } else {
                                let src = &xc[(iz as usize * h + iy as usize) * w..][..w];
                                for (xo, o) in out.iter_mut().enumerate() {
                                    let ix = (xo * sw + cc) as isize - pw as isize;
                                    *o = if ix < 0 || ix >= w as isize {
                                        R::zero()
                                    } else {
                                        src[ix as usize]
                                    };
                                }
                            }
                            idx += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[c_in, d, h, w]`
/// sample (which is accumulated into, not overwritten).
pub(crate) fn col2im<R: Real>(g: &ConvGeom, cols: &[R], x: &mut [R]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let p = g.out_volume();
    let mut row = 0;
    for c in 0..g.c_in {
        let xc = &mut x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            for bb in 0..kh {
                for cc in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for z in 0..od {
                        let iz = (z * sd + a) as isize - pd as isize;
                        for y in 0..oh {
                            let iy = (y * sh + bb) as isize - ph as isize;
                            if iz >= 0 && iz < d as isize && iy >= 0 && iy < h as isize {
                                let dst = &mut xc[(iz as usize * h + iy as usize) * w..][..w];
                                for (xo, &v) in src[idx..idx + ow].iter().enumerate() {
                                    let ix = (xo * sw + cc) as isize - pw as isize;
                                    if ix >= 0 && ix < w as isize {
                                        dst[ix as usize] += v;
                                    }
                                }
                            }
                            idx += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Cross-correlation forward over a batch. `kernel` is `[c_out, c_in, k...]`.
pub(crate) fn conv_forward<R: Real>(
    g: &ConvGeom,
    batch: usize,
    x: &[R],
    kernel: &[R],
    bias: Option<&[R]>,
) -> Vec<R> {
    let (r, p) = (g.patch_len(), g.out_volume());
    let in_len = g.c_in * g.in_volume();
    let mut out = vec![R::zero(); batch * g.c_out * p];
    let mut cols = vec![R::zero(); r * p];
    for b in 0..batch {
        im2col(g, &x[b * in_len..(b + 1) * in_len], &mut cols);
        let ob = &mut out[b * g.c_out * p..(b + 1) * g.c_out * p];
        gemm((g.c_out, r, p), kernel, (r, 1), &cols, (p, 1), R::zero(), ob, (p, 1));
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                ob[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of [`conv_forward`]. Each requested output is returned freshly
/// allocated.
pub(crate) struct ConvGrads<R> {
    pub input: Option<Vec<R>>,
    pub kernel: Option<Vec<R>>,
    pub bias: Option<Vec<R>>,
}

pub(crate) fn conv_backward<R: Real>(
    g: &ConvGeom,
    batch: usize,
    x: &[R],
    kernel: &[R],
    dout: &[R],
    want: [bool; 3],
) -> ConvGrads<R> {
    let (r, p) = (g.patch_len(), g.out_volume());
    let in_len = g.c_in * g.in_volume();
    let out_len = g.c_out * p;
    let mut dx = want[0].then(|| vec![R::zero(); batch * in_len]);
    let mut dk = want[1].then(|| vec![R::zero(); g.c_out * r]);
    let db = want[2].then(|| channel_sums(dout, batch, g.c_out, p));
    let mut cols = vec![R::zero(); r * p];
    for b in 0..batch {
        let dob = &dout[b * out_len..(b + 1) * out_len];
        if let Some(dk) = dk.as_mut() {
            im2col(g, &x[b * in_len..(b + 1) * in_len], &mut cols);
            gemm((g.c_out, p, r), dob, (p, 1), &cols, (1, p), R::one(), dk, (r, 1));
        }
        if let Some(dx) = dx.as_mut() {
            gemm((r, g.c_out, p), kernel, (1, r), dob, (p, 1), R::zero(), &mut cols, (p, 1));
            col2im(g, &cols, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}

/// Transposed convolution forward: the input-gradient map of the convolution
/// described by `g`. `x` is `[batch, g.c_out, g.output]`, `kernel` is
/// `[g.c_out, g.c_in, k...]`, result is `[batch, g.c_in, g.input]`.
pub(crate) fn conv_transpose_forward<R: Real>(
    g: &ConvGeom,
    batch: usize,
    x: &[R],
    kernel: &[R],
    bias: Option<&[R]>,
) -> Vec<R> {
    let (r, p) = (g.patch_len(), g.out_volume());
    let x_len = g.c_out * p;
    let y_len = g.c_in * g.in_volume();
    let mut y = vec![R::zero(); batch * y_len];
    let mut cols = vec![R::zero(); r * p];
    for b in 0..batch {
        let xb = &x[b * x_len..(b + 1) * x_len];
        gemm((r, g.c_out, p), kernel, (1, r), xb, (p, 1), R::zero(), &mut cols, (p, 1));
        let yb = &mut y[b * y_len..(b + 1) * y_len];
        col2im(g, &cols, yb);
        if let Some(bias) = bias {
            let vol = g.in_volume();
            for (c, &bv) in bias.iter().enumerate() {
                yb[c * vol..(c + 1) * vol].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    y
}

pub(crate) fn conv_transpose_backward<R: Real>(
    g: &ConvGeom,
    batch: usize,
    x: &[R],
    kernel: &[R],
    dy: &[R],
    want: [bool; 3],
) -> ConvGrads<R> {
    let (r, p) = (g.patch_len(), g.out_volume());
    let x_len = g.c_out * p;
    let y_len = g.c_in * g.in_volume();
    let mut dx = want[0].then(|| vec![R::zero(); batch * x_len]);
    let mut dk = want[1].then(|| vec![R::zero(); g.c_out * r]);
    let db = want[2].then(|| channel_sums(dy, batch, g.c_in, g.in_volume()));
    if dx.is_none() && dk.is_none() {
        return ConvGrads {
            input: None,
            kernel: None,
            bias: db,
        };
    }
    let mut cols = vec![R::zero(); r * p];
    for b in 0..batch {
        im2col(g, &dy[b * y_len..(b + 1) * y_len], &mut cols);
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * x_len..(b + 1) * x_len];
            gemm((g.c_out, r, p), kernel, (r, 1), &cols, (p, 1), R::zero(), dxb, (p, 1));
        }
        if let Some(dk) = dk.as_mut() {
            let xb = &x[b * x_len..(b + 1) * x_len];
            gemm((g.c_out, p, r), xb, (p, 1), &cols, (1, p), R::one(), dk, (r, 1));
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}

fn channel_sums<R: Real>(v: &[R], batch: usize, channels: usize, inner: usize) -> Vec<R> {
    let mut out = vec![R::zero(); channels];
    for b in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            let start = (b * channels + c) * inner;
            *o += v[start..start + inner].iter().copied().sum::<R>();
        }
    }
    out
}

/// Per-channel mean and biased variance of a `[batch, channels, inner]` array.
pub(crate) fn channel_moments<R: Real>(
    x: &[R],
    batch: usize,
    channels: usize,
    inner: usize,
) -> (Vec<R>, Vec<R>) {
    let n = R::of((batch * inner) as f64);
    let mut mean = vec![R::zero(); channels];
    let mut var = vec![R::zero(); channels];
    for c in 0..channels {
        let mut s = R::zero();
        for b in 0..batch {
            let start = (b * channels + c) * inner;
            s += x[start..start + inner].iter().copied().sum::<R>();
        }
        let m = s / n;
        let mut q = R::zero();
        for b in 0..batch {
            let start = (b * channels + c) * inner;
            for &v in &x[start..start + inner] {
                q += (v - m) * (v - m);
            }
        }
        mean[c] = m;
        var[c] = q / n;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_output_extents() {
        let g = ConvGeom::new(1, 1, [1, 5, 5], [1, 3, 3], [1, 2, 2], [0, 1, 1]).unwrap();
        assert_eq!(g.output, [1, 3, 3]);
        let t = ConvGeom::for_transpose(1, 1, [1, 8, 8], [1, 4, 4], [1, 2, 2], [0, 1, 1]).unwrap();
        assert_eq!(t.input, [1, 16, 16]);
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        assert!(ConvGeom::new(1, 1, [1, 2, 2], [1, 3, 3], [1, 1, 1], [0, 0, 0]).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 1, [2, 4, 5], [2, 3, 2], [1, 2, 1], [1, 1, 0]).unwrap();
        let n_in = g.c_in * g.in_volume();
        let n_cols = g.patch_len() * g.out_volume();
        let x: Vec<f64> = (0..n_in).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let u: Vec<f64> = (0..n_cols).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
        let mut cols = vec![0.0; n_cols];
        im2col(&g, &x, &mut cols);
        let mut back = vec![0.0; n_in];
        col2im(&g, &u, &mut back);
        let lhs: f64 = cols.iter().zip(&u).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
