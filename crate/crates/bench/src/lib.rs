//! Deterministic inputs shared by the benchmarks.

use freqsr_core::Tensor;

/// Smooth gradient plus two oriented gratings, values in [0, 1].
pub fn synthetic_image(h: usize, w: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64, x as f64);
            let v = 0.5
                + 0.2 * (fx / w as f64 - 0.5)
                + 0.15 * (0.35 * fx + 0.1 * fy).sin()
                + 0.1 * (0.9 * fy - 0.4 * fx).cos();
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Tensor::from_vec(&[h, w], data).expect("shape matches")
}
