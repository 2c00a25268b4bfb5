//! Bilinear resampling with align-corners semantics: output corner pixels
//! sample input corner pixels exactly.

use super::Real;

/// Source coordinate taps `(i0, i1, frac)` for every output index.
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let src = if n_out == 1 || n_in == 1 {
                0.0
            } else {
                o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            };
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Resize every trailing `[h, w]` plane of `x` to `[oh, ow]`.
pub fn bilinear_forward<F: Real>(x: &[F], h: usize, w: usize, oh: usize, ow: usize) -> Vec<F> {
    let planes = x.len() / (h * w);
    if h == oh && w == ow {
        return x.to_vec();
    }
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = vec![F::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = F::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = F::from_f64_lossy(fx);
                let top = src[y0 * w + x0] * (F::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (F::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (F::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn bilinear_backward<F: Real>(dy: &[F], h: usize, w: usize, oh: usize, ow: usize) -> Vec<F> {
    let planes = dy.len() / (oh * ow);
    if h == oh && w == ow {
        return dy.to_vec();
    }
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut dx = vec![F::zero(); planes * h * w];
    for p in 0..planes {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = F::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = F::from_f64_lossy(fx);
                let v = g[oy * ow + ox];
                let top = v * (F::one() - fy);
                let bot = v * fy;
                d[y0 * w + x0] = d[y0 * w + x0] + top * (F::one() - fx);
                d[y0 * w + x1] = d[y0 * w + x1] + top * fx;
                d[y1 * w + x0] = d[y1 * w + x0] + bot * (F::one() - fx);
                d[y1 * w + x1] = d[y1 * w + x1] + bot * fx;
            }
        }
    }
    dx
}
