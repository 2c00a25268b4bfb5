use num_complex::Complex;
use rustfft::{FftNum, FftPlanner};

use super::{Array, Real};

/// Power spectrum `|DFT(x)|²` per bin. Preprocessing only; never tracked.
pub fn fft_power<T: FftNum + Real>(x: &[Complex<T>]) -> Array<T> {
    let mut buf = x.to_vec();
    if !buf.is_empty() {
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(buf.len()).process(&mut buf);
    }
    let power: Vec<T> = buf.iter().map(|c| c.norm_sqr()).collect();
    Array::new(vec![power.len()], power).expect("length matches")
}

/// Power spectra of many equal-length rows with one plan.
pub fn fft_power_rows<T: FftNum + Real>(rows: &mut [Complex<T>], n: usize) -> Vec<T> {
    if n > 0 && !rows.is_empty() {
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(n).process(rows);
    }
    rows.iter().map(|c| c.norm_sqr()).collect()
}
