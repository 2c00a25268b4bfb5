//! Dense arrays, storage tensors, and the reverse-mode differentiation tape
//! underneath every model computation.

mod array;
pub mod conv;
mod fft;
mod graph;
mod params;
mod real;
pub mod resize;
mod tensor;
#[cfg(test)]
mod tests;

pub use array::Array;
pub use fft::{fft_power, fft_power_rows};
pub use graph::{BnMode, Graph, Var};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use real::Real;
pub use tensor::{DType, Tensor, TensorData};

/// Epsilon shared by layer and batch normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Momentum for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Resize a `[.., H, W]` array outside of any tape.
pub fn bilinear_resize<F: Real>(
    x: &Array<F>,
    out_h: usize,
    out_w: usize,
) -> crate::Result<Array<F>> {
    let s = x.shape();
    if s.len() < 2 || out_h == 0 || out_w == 0 {
        return Err(crate::Error::dim("bilinear_resize", s, &[out_h, out_w]));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let data = resize::bilinear_forward(x.data(), h, w, out_h, out_w);
    let mut shape = s.to_vec();
    let nd = shape.len();
    shape[nd - 2] = out_h;
    shape[nd - 1] = out_w;
    Array::new(shape, data)
}
