//! Direct NHWC convolution kernels.
//!
//! Every routine works on one [`ConvGeom`], which describes a forward
//! cross-correlation from an `in_*` map to an `out_*` map. The transposed
//! convolution reuses the same geometry with the roles of the two maps
//! swapped, so the pair is an exact adjoint by construction.

use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size `ceil(in / stride)`; zero padding split evenly
    /// with the odd cell on the bottom/right.
    Same,
    /// No padding.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn out_extent(input: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => (input >= k).then(|| ((input - k) / stride + 1, 0)),
    }
}

fn check_4d(op: &'static str, input: &[usize], kernel: &[usize], stride: usize) -> Result<()> {
    if input.len() != 4 || kernel.len() != 4 {
        return Err(TensorError::InvalidShape {
            op,
            msg: format!("expected rank-4 input and kernel, got {input:?} and {kernel:?}"),
        });
    }
    if stride == 0 {
        return Err(TensorError::InvalidShape { op, msg: "stride must be positive".into() });
    }
    Ok(())
}

impl ConvGeom {
    /// Geometry of `conv2d(input[B,H,W,Cin], kernel[kh,kw,Cin,Cout])`.
    pub fn conv(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        check_4d("conv2d", input, kernel, stride)?;
        let (batch, in_h, in_w, in_c) = (input[0], input[1], input[2], input[3]);
        let (k_h, k_w, k_in, out_c) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if k_in != in_c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        let (Some((out_h, pad_top)), Some((out_w, pad_left))) = (
            out_extent(in_h, k_h, stride, padding),
            out_extent(in_w, k_w, stride, padding),
        ) else {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        };
        Ok(Self { batch, in_h, in_w, in_c, out_h, out_w, out_c, k_h, k_w, stride, pad_top, pad_left })
    }

    /// Geometry of `conv2d_transpose(input[B,H,W,Cin], kernel[kh,kw,Cout,Cin])`,
    /// expressed as the forward convolution it is the adjoint of. The
    /// transposed output is the returned geometry's `in_*` map.
    pub fn transpose(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        check_4d("conv2d_transpose", input, kernel, stride)?;
        let (batch, h, w, c) = (input[0], input[1], input[2], input[3]);
        let (k_h, k_w, out_c, k_in) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if k_in != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_transpose",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        let full = |n: usize, k: usize| match padding {
            Padding::Same => n * stride,
            Padding::Valid => (n - 1) * stride + k,
        };
        if h == 0 || w == 0 {
            return Err(TensorError::InvalidShape {
                op: "conv2d_transpose",
                msg: format!("empty spatial extent in {input:?}"),
            });
        }
        let geom = Self::conv(&[batch, full(h, k_h), full(w, k_w), out_c], kernel, stride, padding)?;
        debug_assert_eq!((geom.out_h, geom.out_w, geom.out_c), (h, w, c));
        Ok(geom)
    }

    pub fn in_shape(&self) -> Vec<usize> {
        vec![self.batch, self.in_h, self.in_w, self.in_c]
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_h, self.out_w, self.out_c]
    }

    fn in_item(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    fn out_item(&self) -> usize {
        self.out_h * self.out_w * self.out_c
    }

    /// Calls `f(out_pixel, in_pixel, tap)` for every valid (output, kernel tap)
    /// pair; pixels are flat `y * w + x` indices, taps `ky * k_w + kx`.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for oy in 0..self.out_h {
            for ky in 0..self.k_h {
                let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                if iy < 0 || iy >= self.in_h as isize {
                    continue;
                }
                for ox in 0..self.out_w {
                    for kx in 0..self.k_w {
                        let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                        if ix < 0 || ix >= self.in_w as isize {
                            continue;
                        }
                        f(
                            oy * self.out_w + ox,
                            iy as usize * self.in_w + ix as usize,
                            ky * self.k_w + kx,
                        );
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation `in -> out`.
pub(crate) fn forward<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T]) -> Vec<T> {
    let (ic, oc) = (g.in_c, g.out_c);
    let mut out = vec![T::zero(); g.batch * g.out_item()];
    out.par_chunks_mut(g.out_item())
        .zip(input.par_chunks(g.in_item()))
        .for_each(|(ob, xb)| {
            g.for_each_tap(|op, ip, tap| {
                let orow = &mut ob[op * oc..(op + 1) * oc];
                let xrow = &xb[ip * ic..(ip + 1) * ic];
                let kbase = tap * ic * oc;
                for (ci, &xv) in xrow.iter().enumerate() {
                    let krow = &kernel[kbase + ci * oc..kbase + (ci + 1) * oc];
                    for (o, &kv) in orow.iter_mut().zip(krow) {
                        *o += xv * kv;
                    }
                }
            });
        });
    out
}

/// Adjoint of [`forward`] with respect to its input: maps an `out` map back
/// to an `in` map.
pub(crate) fn backward_input<T: Scalar>(g: &ConvGeom, grad_out: &[T], kernel: &[T]) -> Vec<T> {
    let (ic, oc) = (g.in_c, g.out_c);
    let mut dx = vec![T::zero(); g.batch * g.in_item()];
    dx.par_chunks_mut(g.in_item())
        .zip(grad_out.par_chunks(g.out_item()))
        .for_each(|(db, gb)| {
            g.for_each_tap(|op, ip, tap| {
                let grow = &gb[op * oc..(op + 1) * oc];
                let drow = &mut db[ip * ic..(ip + 1) * ic];
                let kbase = tap * ic * oc;
                for (ci, d) in drow.iter_mut().enumerate() {
                    let krow = &kernel[kbase + ci * oc..kbase + (ci + 1) * oc];
                    let mut acc = T::zero();
                    for (&gv, &kv) in grow.iter().zip(krow) {
                        acc += gv * kv;
                    }
                    *d += acc;
                }
            });
        });
    dx
}

/// Gradient of [`forward`] with respect to the kernel. Per-item partial sums
/// are reduced in batch order so the result does not depend on scheduling.
pub(crate) fn backward_kernel<T: Scalar>(g: &ConvGeom, input: &[T], grad_out: &[T]) -> Vec<T> {
    let (ic, oc) = (g.in_c, g.out_c);
    let klen = g.k_h * g.k_w * ic * oc;
    let partials: Vec<Vec<T>> = input
        .par_chunks(g.in_item())
        .zip(grad_out.par_chunks(g.out_item()))
        .map(|(xb, gb)| {
            let mut dk = vec![T::zero(); klen];
            g.for_each_tap(|op, ip, tap| {
                let grow = &gb[op * oc..(op + 1) * oc];
                let xrow = &xb[ip * ic..(ip + 1) * ic];
                let kbase = tap * ic * oc;
                for (ci, &xv) in xrow.iter().enumerate() {
                    let krow = &mut dk[kbase + ci * oc..kbase + (ci + 1) * oc];
                    for (k, &gv) in krow.iter_mut().zip(grow) {
                        *k += xv * gv;
                    }
                }
            });
            dk
        })
        .collect();
    let mut total = vec![T::zero(); klen];
    for part in &partials {
        for (t, &p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_puts_odd_cell_last() {
        // in 4, k 3, stride 2 -> out 2, total padding 1 -> top 0, bottom 1
        let g = ConvGeom::conv(&[1, 4, 4, 1], &[3, 3, 1, 1], 2, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (2, 0));
        // in 5, k 3, stride 1 -> total 2 -> top 1
        let g = ConvGeom::conv(&[1, 5, 5, 1], &[3, 3, 1, 1], 1, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (5, 1));
    }

    #[test]
    fn transpose_geometry_inverts_conv() {
        let g = ConvGeom::transpose(&[2, 3, 5, 4], &[3, 3, 6, 4], 2, Padding::Same).unwrap();
        assert_eq!(g.in_shape(), vec![2, 6, 10, 6]);
        let g = ConvGeom::transpose(&[1, 3, 3, 2], &[3, 3, 1, 2], 1, Padding::Valid).unwrap();
        assert_eq!(g.in_shape(), vec![1, 5, 5, 1]);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let err = ConvGeom::conv(&[1, 4, 4, 2], &[3, 3, 3, 1], 1, Padding::Same).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 4, 4, 2]") && msg.contains("[3, 3, 3, 1]"), "{msg}");
    }

    #[test]
    fn valid_rejects_kernel_larger_than_input() {
        assert!(ConvGeom::conv(&[1, 2, 2, 1], &[3, 3, 1, 1], 1, Padding::Valid).is_err());
    }
}
