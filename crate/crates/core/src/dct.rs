//! 8x8 block DCT: analytic basis, zigzag ordering, forward/inverse block
//! transforms and the basis measurements used by the regularizer.
//!
//! Filters are stored as a `[64, 64]` matrix: row `k` is the kernel for zigzag
//! index `k`, flattened row-major over `(x, y)` pixel positions. The analytic
//! basis uses orthonormal DCT-II scaling, so the block transform is an
//! orthogonal matrix and its transpose is its exact inverse.

use std::f64::consts::PI;

use crate::autograd::{bessel_variance, Graph, BLOCK, BLOCK_AREA};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

/// Zigzag index -> natural (row-major `u * 8 + v`) index, JPEG scan order.
pub const ZIGZAG_TO_NATURAL: [usize; 64] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27, 20,
    13, 6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58, 59,
    52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
];

const fn invert_zigzag() -> [usize; 64] {
    let mut out = [0usize; 64];
    let mut k = 0;
    while k < 64 {
        out[ZIGZAG_TO_NATURAL[k]] = k;
        k += 1;
    }
    out
}

/// Natural index -> zigzag index.
pub const NATURAL_TO_ZIGZAG: [usize; 64] = invert_zigzag();

/// Zigzag position of row-frequency `u` and column-frequency `v`.
pub fn zigzag_index(u: usize, v: usize) -> Result<usize> {
    if u >= BLOCK || v >= BLOCK {
        return Err(Error::OutOfRange(format!(
            "frequency ({u}, {v}) outside the 8x8 block"
        )));
    }
    Ok(NATURAL_TO_ZIGZAG[u * BLOCK + v])
}

/// Frequencies `(u, v)` at zigzag position `k`.
pub fn zigzag_inverse(k: usize) -> Result<(usize, usize)> {
    if k >= BLOCK_AREA {
        return Err(Error::OutOfRange(format!("zigzag index {k} >= 64")));
    }
    let n = ZIGZAG_TO_NATURAL[k];
    Ok((n / BLOCK, n % BLOCK))
}

/// 64 zigzag-ordered 8x8 kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisSet<T = f64> {
    /// `[64, 64]`: row `k` is kernel `k` flattened over `(x, y)`.
    pub filters: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> BasisSet<T> {
    pub fn from_filters(filters: Tensor<T>, trainable: bool) -> Result<Self> {
        if filters.shape() != [BLOCK_AREA, BLOCK_AREA] {
            return Err(Error::Shape(format!(
                "basis must be [64, 64], got {:?}",
                filters.shape()
            )));
        }
        Ok(BasisSet { filters, trainable })
    }

    /// Kernel `k` as a flat 64-vector.
    pub fn filter(&self, k: usize) -> &[T] {
        &self.filters.data()[k * BLOCK_AREA..(k + 1) * BLOCK_AREA]
    }

    /// Kernel `k` value at pixel `(x, y)`.
    pub fn at(&self, k: usize, x: usize, y: usize) -> T {
        self.filter(k)[x * BLOCK + y]
    }
}

fn dct_scale(freq: usize) -> f64 {
    if freq == 0 {
        (1.0 / BLOCK as f64).sqrt()
    } else {
        (2.0 / BLOCK as f64).sqrt()
    }
}

/// Analytic orthonormal DCT-II basis in zigzag order.
pub fn make_dct_basis<T: Scalar>() -> BasisSet<T> {
    let n = BLOCK as f64;
    let mut data = Vec::with_capacity(BLOCK_AREA * BLOCK_AREA);
    for k in 0..BLOCK_AREA {
        let (u, v) = zigzag_inverse(k).expect("k < 64");
        let c = dct_scale(u) * dct_scale(v);
        for x in 0..BLOCK {
            for y in 0..BLOCK {
                let cx = (PI / n * (x as f64 + 0.5) * u as f64).cos();
                let cy = (PI / n * (y as f64 + 0.5) * v as f64).cos();
                data.push(T::lit(c * cx * cy));
            }
        }
    }
    BasisSet {
        filters: Tensor::from_vec(&[BLOCK_AREA, BLOCK_AREA], data).expect("64x64"),
        trainable: true,
    }
}

/// Zigzag-ordered 64-channel coefficient grid of an image.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralMap<T = f64> {
    /// `[64, Hb, Wb]`.
    pub coeffs: Tensor<T>,
    /// Pixel dimensions `(H, W)` of the transformed image.
    pub source_shape: (usize, usize),
}

impl<T: Scalar> SpectralMap<T> {
    pub fn zeros(hb: usize, wb: usize) -> Self {
        SpectralMap {
            coeffs: Tensor::zeros(&[BLOCK_AREA, hb, wb]),
            source_shape: (hb * BLOCK, wb * BLOCK),
        }
    }

    pub fn from_coeffs(coeffs: Tensor<T>) -> Result<Self> {
        let s = coeffs.shape();
        if s.len() != 3 || s[0] != BLOCK_AREA {
            return Err(Error::Shape(format!(
                "spectral map must be [64, Hb, Wb], got {s:?}"
            )));
        }
        let source_shape = (s[1] * BLOCK, s[2] * BLOCK);
        Ok(SpectralMap {
            coeffs,
            source_shape,
        })
    }

    /// Block-grid dimensions `(Hb, Wb)`.
    pub fn grid(&self) -> (usize, usize) {
        let s = self.coeffs.shape();
        (s[1], s[2])
    }

    /// The 64 coefficients of block `(i, j)`.
    pub fn block(&self, i: usize, j: usize) -> Vec<T> {
        let (hb, wb) = self.grid();
        let d = self.coeffs.data();
        (0..BLOCK_AREA).map(|k| d[(k * hb + i) * wb + j]).collect()
    }

    pub fn set_block(&mut self, i: usize, j: usize, values: &[T]) {
        let (hb, wb) = self.grid();
        let d = self.coeffs.data_mut();
        for (k, &v) in values.iter().enumerate().take(BLOCK_AREA) {
            d[(k * hb + i) * wb + j] = v;
        }
    }

    /// Every block's coefficients, row-major over the grid.
    pub fn blocks(&self) -> Vec<Vec<T>> {
        let (hb, wb) = self.grid();
        (0..hb)
            .flat_map(|i| (0..wb).map(move |j| (i, j)))
            .map(|(i, j)| self.block(i, j))
            .collect()
    }
}

fn check_image<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("expected an [H, W] image, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    if h == 0 || w == 0 || h % BLOCK != 0 || w % BLOCK != 0 {
        return Err(Error::Dimension(format!(
            "image {h}x{w} is not divisible into 8x8 blocks"
        )));
    }
    Ok((h, w))
}

/// Non-overlapping block transform of an `[H, W]` image.
pub fn forward_cdct<T: Scalar>(image: &Tensor<T>, basis: &BasisSet<T>) -> Result<SpectralMap<T>> {
    let (h, w) = check_image(image)?;
    let mut g = Graph::new();
    let img = g.constant(image.clone().reshape(&[1, 1, h, w])?);
    let f = g.constant(basis.filters.clone());
    let s = g.block_dct(img, f);
    let coeffs = g
        .value(s)
        .clone()
        .reshape(&[BLOCK_AREA, h / BLOCK, w / BLOCK])?;
    Ok(SpectralMap {
        coeffs,
        source_shape: (h, w),
    })
}

/// Transpose of [`forward_cdct`]; its exact inverse for an orthonormal basis.
pub fn inverse_cdct<T: Scalar>(spec: &SpectralMap<T>, basis: &BasisSet<T>) -> Result<Tensor<T>> {
    let s = spec.coeffs.shape();
    if s.len() != 3 || s[0] != BLOCK_AREA {
        return Err(Error::Shape(format!(
            "spectral map must have 64 channels, got {s:?}"
        )));
    }
    if basis.filters.shape() != [BLOCK_AREA, BLOCK_AREA] {
        return Err(Error::Shape("basis must be [64, 64]".into()));
    }
    let (hb, wb) = (s[1], s[2]);
    let mut g = Graph::new();
    let sp = g.constant(spec.coeffs.clone().reshape(&[1, BLOCK_AREA, hb, wb])?);
    let f = g.constant(basis.filters.clone());
    let img = g.block_idct(sp, f);
    g.value(img).clone().reshape(&[hb * BLOCK, wb * BLOCK])
}

/// Gram matrix of the vectorized filters.
pub fn basis_gram<T: Scalar>(basis: &BasisSet<T>) -> Tensor<T> {
    let f = basis.filters.data();
    let mut out = vec![T::zero(); BLOCK_AREA * BLOCK_AREA];
    gemm(
        false,
        true,
        BLOCK_AREA,
        BLOCK_AREA,
        BLOCK_AREA,
        f,
        f,
        T::zero(),
        &mut out,
    );
    Tensor::from_vec(&[BLOCK_AREA, BLOCK_AREA], out).expect("64x64")
}

/// Bessel-corrected variance of one kernel's 64 entries.
pub fn basis_variance<T: Scalar>(filter: &[T]) -> T {
    bessel_variance(filter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Cosine-product evaluation of one coefficient, straight from the definition.
    fn brute_coefficient(block: &[f64], u: usize, v: usize) -> f64 {
        let n: f64 = 8.0;
        let cu = if u == 0 {
            (1.0 / n).sqrt()
        } else {
            (2.0 / n).sqrt()
        };
        let cv = if v == 0 {
            (1.0 / n).sqrt()
        } else {
            (2.0 / n).sqrt()
        };
        let mut acc = 0.0;
        for x in 0..8 {
            for y in 0..8 {
                acc += block[x * 8 + y]
                    * cu
                    * cv
                    * (PI / n * (x as f64 + 0.5) * u as f64).cos()
                    * (PI / n * (y as f64 + 0.5) * v as f64).cos();
            }
        }
        acc
    }

    #[test]
    fn zigzag_known_positions() {
        assert_eq!(zigzag_index(0, 0).unwrap(), 0);
        assert_eq!(zigzag_index(0, 1).unwrap(), 1);
        assert_eq!(zigzag_index(1, 0).unwrap(), 2);
        assert_eq!(zigzag_index(2, 0).unwrap(), 3);
        assert_eq!(zigzag_index(7, 7).unwrap(), 63);
        assert!(zigzag_index(8, 0).is_err());
        assert!(zigzag_inverse(64).is_err());
    }

    #[test]
    fn zigzag_round_trip() {
        for u in 0..8 {
            for v in 0..8 {
                let k = zigzag_index(u, v).unwrap();
                assert_eq!(zigzag_inverse(k).unwrap(), (u, v));
            }
        }
    }

    #[test]
    fn zigzag_walks_antidiagonals_in_order() {
        let sums: Vec<usize> = (0..64)
            .map(|k| {
                let (u, v) = zigzag_inverse(k).unwrap();
                u + v
            })
            .collect();
        assert!(sums.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn dc_kernel_is_constant_one_eighth() {
        let b = make_dct_basis::<f64>();
        // cos(0) = 1 everywhere, orthonormal DC scale sqrt(1/8)^2
        for &v in b.filter(0) {
            assert!((v - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn basis_is_orthonormal() {
        let b = make_dct_basis::<f64>();
        let gram = basis_gram(&b);
        for i in 0..64 {
            for j in 0..64 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram.data()[i * 64 + j] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn filters_follow_zigzag_frequencies() {
        let b = make_dct_basis::<f64>();
        for k in 0..64 {
            let (u, v) = zigzag_inverse(k).unwrap();
            // sign changes along a row/column equal the frequency
            let row: Vec<f64> = (0..8).map(|y| b.at(k, 0, y)).collect();
            let col: Vec<f64> = (0..8).map(|x| b.at(k, x, 0)).collect();
            let flips = |s: &[f64]| s.windows(2).filter(|w| w[0] * w[1] < 0.0).count();
            assert_eq!(flips(&row), v, "k={k}");
            assert_eq!(flips(&col), u, "k={k}");
        }
    }

    #[test]
    fn constant_patch_has_only_dc() {
        let b = make_dct_basis::<f64>();
        let img = Tensor::full(&[16, 24], 1.0);
        let s = forward_cdct(&img, &b).unwrap();
        assert_eq!(s.grid(), (2, 3));
        for blk in s.blocks() {
            assert!((blk[0] - 8.0).abs() < 1e-12);
            assert!(blk[1..].iter().all(|c| c.abs() < 1e-12));
        }
    }

    #[test]
    fn zero_patch_gives_zero_map() {
        let b = make_dct_basis::<f64>();
        let s = forward_cdct(&Tensor::zeros(&[8, 8]), &b).unwrap();
        assert_eq!(s.coeffs.max_abs(), 0.0);
        let back = inverse_cdct(&SpectralMap::<f64>::zeros(2, 2), &b).unwrap();
        assert_eq!(back.shape(), &[16, 16]);
        assert_eq!(back.max_abs(), 0.0);
    }

    #[test]
    fn dc_only_map_inverts_to_constant() {
        let b = make_dct_basis::<f64>();
        let mut s = SpectralMap::<f64>::zeros(1, 2);
        let mut dc = vec![0.0; 64];
        dc[0] = 8.0;
        s.set_block(0, 0, &dc);
        s.set_block(0, 1, &dc);
        let img = inverse_cdct(&s, &b).unwrap();
        assert!(img.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn random_block_matches_direct_summation() {
        let b = make_dct_basis::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::<f64>::rand_uniform(&[8, 8], 0.0, 1.0, &mut rng);
        let s = forward_cdct(&img, &b).unwrap();
        let blk = s.block(0, 0);
        for (k, &c) in blk.iter().enumerate() {
            let (u, v) = zigzag_inverse(k).unwrap();
            assert!((c - brute_coefficient(img.data(), u, v)).abs() < 1e-12);
        }
    }

    #[test]
    fn non_divisible_dimensions_rejected() {
        let b = make_dct_basis::<f64>();
        let err = forward_cdct(&Tensor::zeros(&[10, 16]), &b).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        let bad = SpectralMap {
            coeffs: Tensor::<f64>::zeros(&[32, 2, 2]),
            source_shape: (16, 16),
        };
        assert!(inverse_cdct(&bad, &b).is_err());
    }

    #[test]
    fn variance_of_zero_filter_and_analytic_basis() {
        assert_eq!(basis_variance(&[0.0f64; 64]), 0.0);
        let b = make_dct_basis::<f64>();
        let b2 = make_dct_basis::<f64>();
        for k in 0..64 {
            assert_eq!(
                basis_variance(b.filter(k)) - basis_variance(b2.filter(k)),
                0.0
            );
        }
        // DC kernel is constant; every AC kernel sums to zero with unit energy
        assert_eq!(basis_variance(b.filter(0)), 0.0);
        assert!((basis_variance(b.filter(5)) - 1.0 / 63.0).abs() < 1e-12);
    }
}
