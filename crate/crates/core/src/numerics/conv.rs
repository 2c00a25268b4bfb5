//! im2col convolution kernels on NCHW buffers.

use rayon::prelude::*;

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

fn im2col<F: Real>(g: &ConvGeom, x: &[F], cols: &mut [F]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(F::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<F: Real>(g: &ConvGeom, cols: &[F], dx: &mut [F]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    for c in 0..g.cin {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] = drow[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[b] = w · im2col(x[b]) + bias`, one image per task.
pub fn conv2d_forward<F: Real>(
    g: &ConvGeom,
    batch: usize,
    x: &[F],
    w: &[F],
    bias: Option<&[F]>,
) -> Vec<F> {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * plane;
    let mut out = vec![F::zero(); batch * out_sz];
    out.par_chunks_mut(out_sz)
        .zip(x.par_chunks(in_sz))
        .for_each_init(
            || {
                vec![
                    F::zero();
                    if g.is_pointwise() {
                        0
                    } else {
                        g.col_rows() * plane
                    }
                ]
            },
            |cols, (ob, xb)| {
                let src: &[F] = if g.is_pointwise() {
                    xb
                } else {
                    im2col(g, xb, cols);
                    cols
                };
                F::gemm(
                    g.cout,
                    g.col_rows(),
                    plane,
                    w,
                    false,
                    src,
                    false,
                    F::zero(),
                    ob,
                );
                if let Some(bias) = bias {
                    for (row, &bv) in ob.chunks_mut(plane).zip(bias) {
                        row.iter_mut().for_each(|v| *v = *v + bv);
                    }
                }
            },
        );
    out
}

/// Returns `(dx, dw, dbias)`; the per-image weight gradients are reduced in
/// image order so results do not depend on the thread count.
pub fn conv2d_backward<F: Real>(
    g: &ConvGeom,
    batch: usize,
    x: &[F],
    w: &[F],
    dout: &[F],
    need_dx: bool,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * plane;
    let kdim = g.col_rows();
    let mut dx = vec![F::zero(); if need_dx { batch * in_sz } else { 0 }];

    let per_image = |b: usize, dxb: Option<&mut [F]>| -> Vec<F> {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let db = &dout[b * out_sz..(b + 1) * out_sz];
        let mut dw = vec![F::zero(); g.cout * kdim];
        if g.is_pointwise() {
            F::gemm(g.cout, plane, kdim, db, false, xb, true, F::zero(), &mut dw);
            if let Some(dxb) = dxb {
                F::gemm(kdim, g.cout, plane, w, true, db, false, F::zero(), dxb);
            }
        } else {
            let mut cols = vec![F::zero(); kdim * plane];
            im2col(g, xb, &mut cols);
            F::gemm(
                g.cout,
                plane,
                kdim,
                db,
                false,
                &cols,
                true,
                F::zero(),
                &mut dw,
            );
            if let Some(dxb) = dxb {
                F::gemm(
                    kdim,
                    g.cout,
                    plane,
                    w,
                    true,
                    db,
                    false,
                    F::zero(),
                    &mut cols,
                );
                col2im_add(g, &cols, dxb);
            }
        }
        dw
    };

    let partials: Vec<Vec<F>> = if need_dx {
        dx.par_chunks_mut(in_sz)
            .enumerate()
            .map(|(b, dxb)| per_image(b, Some(dxb)))
            .collect()
    } else {
        (0..batch)
            .into_par_iter()
            .map(|b| per_image(b, None))
            .collect()
    };
    let mut dw = vec![F::zero(); g.cout * kdim];
    for p in &partials {
        for (a, &b) in dw.iter_mut().zip(p) {
            *a = *a + b;
        }
    }
    let mut dbias = vec![F::zero(); g.cout];
    for b in 0..batch {
        for (co, row) in dout[b * out_sz..(b + 1) * out_sz].chunks(plane).enumerate() {
            dbias[co] = dbias[co] + row.iter().copied().sum();
        }
    }
    (dx, dw, dbias)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (ho, wo) = g.out_hw();
        let mut out = vec![0.0; g.cout * ho * wo];
        for co in 0..g.cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..g.cin {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w
                                {
                                    s += x[(ci * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((co * g.cin + ci) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_loop_for_strides() {
        for (stride, k, pad) in [(1, 3, 1), (2, 3, 1), (2, 1, 0), (1, 1, 0)] {
            let g = ConvGeom {
                cin: 2,
                h: 5,
                w: 6,
                cout: 3,
                kh: k,
                kw: k,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..60).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..3 * 2 * k * k)
                .map(|i| (i as f64 * 0.37).cos())
                .collect();
            let got = conv2d_forward(&g, 1, &x, &w, None);
            let want = naive(&g, &x, &w);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "stride {stride} k {k}");
            }
        }
    }
}
