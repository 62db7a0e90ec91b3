//! Convolution kernels over raw NCHW slices.
//!
//! Convolution is cross-correlation lowered to GEMM through im2col. The
//! transposed convolution is the adjoint of that lowering, so the same two
//! helpers drive all four directions.

use super::Real;
use crate::par;

/// Execution mode for kernels. `Par` degrades to `Seq` without the
/// `parallel` feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Seq,
    Par,
}

impl Default for Exec {
    fn default() -> Self {
        if par::is_parallel() {
            Exec::Par
        } else {
            Exec::Seq
        }
    }
}

/// Window geometry shared by a convolution and its transpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    /// Channels on the "image" side (conv input, transposed-conv output).
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Spatial size on the "columns" side.
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

const PAR_GEMM_MIN_WORK: usize = 1 << 20;

/// Row-major `c = alpha * op(a) * op(b) + beta * c`, where `op(a)` is m×k
/// and `op(b)` is k×n.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    exec: Exec,
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: a has wrong length");
    assert_eq!(b.len(), k * n, "gemm: b has wrong length");
    assert_eq!(c.len(), m * n, "gemm: c has wrong length");
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };

    let rows_per_chunk = match exec {
        Exec::Par if par::is_parallel() && m * n * k >= PAR_GEMM_MIN_WORK && m >= 16 => {
            m.div_ceil(4 * worker_count()).max(8)
        }
        _ => m,
    };
    let body = |chunk: usize, rows: &mut [T]| {
        let r0 = chunk * rows_per_chunk;
        let rm = rows.len() / n;
        // SAFETY: row r0.. of op(a) starts at r0 * rsa and spans rm rows; the
        // asserts above bound every slice.
        unsafe {
            T::gemm_raw(
                rm,
                k,
                n,
                alpha,
                a.as_ptr().offset(r0 as isize * rsa),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                rows.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if rows_per_chunk >= m {
        body(0, c);
    } else {
        par::for_each_chunk(c, rows_per_chunk * n, body);
    }
}

fn worker_count() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Unfold one image `(C, H, W)` into `(C·K·K, OH·OW)` columns.
pub fn im2col<T: Real>(g: &ConvGeom, image: &[T], cols: &mut [T]) {
    debug_assert_eq!(image.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * s) as isize + ky as isize - p;
                    let seg = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in seg.iter_mut().enumerate() {
                        let ix = (ox * s) as isize + kx as isize - p;
                        *d = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image buffer.
pub fn col2im<T: Real>(g: &ConvGeom, cols: &[T], image: &mut [T]) {
    debug_assert_eq!(image.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let seg = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in seg.iter().enumerate() {
                        let ix = (ox * s) as isize + kx as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v = *v + b;
        }
    }
}

fn bias_grad<T: Real>(dout: &[T], channels: usize, plane: usize, dbias: &mut [T]) {
    for sample in dout.chunks(channels * plane) {
        for (c, chunk) in sample.chunks(plane).enumerate() {
            dbias[c] = dbias[c] + chunk.iter().copied().sum::<T>();
        }
    }
}

/// Dimensions of a batched convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeom,
}

/// Forward conv2d. `geom` describes the input image side. Returns the output
/// and the cached columns for the backward pass.
pub fn conv2d_forward<T: Real>(
    exec: Exec,
    d: &ConvDims,
    input: &[T],
    kernel: &[T],
    bias: &[T],
) -> (Vec<T>, Vec<T>) {
    let g = d.geom;
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); d.batch * rows * ncols];
    let mut out = vec![T::zero(); d.batch * d.out_channels * ncols];
    let per_sample = |n: usize, o: &mut [T], cols_n: &mut [T]| {
        im2col(&g, &input[n * g.image_len()..(n + 1) * g.image_len()], cols_n);
        gemm(
            Exec::Seq,
            false,
            false,
            d.out_channels,
            ncols,
            rows,
            T::one(),
            kernel,
            cols_n,
            T::zero(),
            o,
        );
        add_bias(o, bias, ncols);
    };
    match exec {
        Exec::Par if d.batch > 1 => {
            let out_len = d.out_channels * ncols;
            let mut pairs: Vec<(&mut [T], &mut [T])> = out
                .chunks_mut(out_len)
                .zip(cols.chunks_mut(rows * ncols))
                .collect();
            par::for_each_chunk(&mut pairs, 1, |n, pair| {
                let (o, c) = &mut pair[0];
                per_sample(n, o, c);
            });
        }
        _ => {
            for (n, (o, c)) in out
                .chunks_mut(d.out_channels * ncols)
                .zip(cols.chunks_mut(rows * ncols))
                .enumerate()
            {
                per_sample(n, o, c);
            }
        }
    }
    (out, cols)
}

/// Backward conv2d given cached columns. Gradients are accumulated into the
/// `Some` outputs.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    exec: Exec,
    d: &ConvDims,
    cols: &[T],
    kernel: &[T],
    dout: &[T],
    dinput: Option<&mut [T]>,
    dkernel: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let g = d.geom;
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let out_len = d.out_channels * ncols;
    if let Some(db) = dbias {
        bias_grad(dout, d.out_channels, ncols, db);
    }
    if let Some(dk) = dkernel {
        for n in 0..d.batch {
            gemm(
                exec,
                false,
                true,
                d.out_channels,
                rows,
                ncols,
                T::one(),
                &dout[n * out_len..(n + 1) * out_len],
                &cols[n * rows * ncols..(n + 1) * rows * ncols],
                T::one(),
                dk,
            );
        }
    }
    if let Some(dx) = dinput {
        let body = |n: usize, dx_n: &mut [T]| {
            let mut dcols = vec![T::zero(); rows * ncols];
            gemm(
                Exec::Seq,
                true,
                false,
                rows,
                ncols,
                d.out_channels,
                T::one(),
                kernel,
                &dout[n * out_len..(n + 1) * out_len],
                T::zero(),
                &mut dcols,
            );
            col2im(&g, &dcols, dx_n);
        };
        match exec {
            Exec::Par => par::for_each_chunk(dx, g.image_len(), body),
            Exec::Seq => par::for_each_chunk_seq(dx, g.image_len(), body),
        }
    }
}

/// Forward transposed conv. Here `geom` describes the *output* image side
/// and `geom.out_h × geom.out_w` is the input spatial size.
pub fn conv_transpose2d_forward<T: Real>(
    exec: Exec,
    d: &ConvDims,
    input: &[T],
    kernel: &[T],
    bias: &[T],
) -> Vec<T> {
    let g = d.geom;
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_len = d.in_channels * ncols;
    let mut out = vec![T::zero(); d.batch * g.image_len()];
    let body = |n: usize, o: &mut [T]| {
        let mut cols = vec![T::zero(); rows * ncols];
        gemm(
            Exec::Seq,
            true,
            false,
            rows,
            ncols,
            d.in_channels,
            T::one(),
            kernel,
            &input[n * in_len..(n + 1) * in_len],
            T::zero(),
            &mut cols,
        );
        col2im(&g, &cols, o);
        add_bias(o, bias, g.height * g.width);
    };
    match exec {
        Exec::Par => par::for_each_chunk(&mut out, g.image_len(), body),
        Exec::Seq => par::for_each_chunk_seq(&mut out, g.image_len(), body),
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Real>(
    exec: Exec,
    d: &ConvDims,
    input: &[T],
    kernel: &[T],
    dout: &[T],
    dinput: Option<&mut [T]>,
    dkernel: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let g = d.geom;
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_len = d.in_channels * ncols;
    if let Some(db) = dbias {
        bias_grad(dout, g.channels, g.height * g.width, db);
    }
    if dinput.is_none() && dkernel.is_none() {
        return;
    }
    let mut dcols = vec![T::zero(); d.batch * rows * ncols];
    {
        let body = |n: usize, c: &mut [T]| {
            im2col(&g, &dout[n * g.image_len()..(n + 1) * g.image_len()], c);
        };
        match exec {
            Exec::Par => par::for_each_chunk(&mut dcols, rows * ncols, body),
            Exec::Seq => par::for_each_chunk_seq(&mut dcols, rows * ncols, body),
        }
    }
    if let Some(dk) = dkernel {
        for n in 0..d.batch {
            gemm(
                exec,
                false,
                true,
                d.in_channels,
                rows,
                ncols,
                T::one(),
                &input[n * in_len..(n + 1) * in_len],
                &dcols[n * rows * ncols..(n + 1) * rows * ncols],
                T::one(),
                dk,
            );
        }
    }
    if let Some(dx) = dinput {
        let body = |n: usize, dx_n: &mut [T]| {
            gemm(
                Exec::Seq,
                false,
                false,
                d.in_channels,
                ncols,
                rows,
                T::one(),
                kernel,
                &dcols[n * rows * ncols..(n + 1) * rows * ncols],
                T::one(),
                dx_n,
            );
        };
        match exec {
            Exec::Par => par::for_each_chunk(dx, in_len, body),
            Exec::Seq => par::for_each_chunk_seq(dx, in_len, body),
        }
    }
}
