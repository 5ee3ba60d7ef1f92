//! Asymmetric integer group quantization.
//!
//! A weight matrix is cut into groups of `group_size` contiguous entries along
//! each row (a shorter tail group closes a row whose length is not a multiple
//! of the group size). Each group gets its own scale `s` and integer zero
//! point `z`:
//!
//! ```text
//! s = (max' - min') / (q_max - q_min)      min' = min(min(W), 0)
//! z = round(q_min - min' / s)              max' = max(max(W), 0)
//! q = clamp(round(W / s) + z, q_min, q_max)
//! W ≈ s · (q - z)
//! ```
//!
//! Widening the range to include zero keeps 0.0 exactly representable. The
//! `strict` flag on [`QuantSpec`] disables the widening.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Lower clamp for group scales.
pub const MIN_SCALE: f64 = 1e-12;

pub const SUPPORTED_BITS: [u8; 5] = [1, 2, 3, 4, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    bits: u8,
    group_size: usize,
    #[serde(default)]
    strict: bool,
}

impl QuantSpec {
    pub fn new(bits: u8, group_size: usize) -> Result<Self> {
        if !SUPPORTED_BITS.contains(&bits) {
            return Err(Error::Domain(format!(
                "unsupported bit width {bits}; expected one of {SUPPORTED_BITS:?}"
            )));
        }
        if group_size == 0 {
            return Err(Error::Domain("group size must be positive".into()));
        }
        Ok(Self {
            bits,
            group_size,
            strict: false,
        })
    }

    /// Fits the literal min/max range without widening it to contain zero.
    pub fn strict(mut self) -> Self {
        self.strict = true;
        self
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    pub fn q_min(&self) -> u32 {
        0
    }

    pub fn q_max(&self) -> u32 {
        (1u32 << self.bits) - 1
    }
}

/// Closed-form scale and zero point for one group.
pub fn fit_group_params(group: &[f64], spec: &QuantSpec) -> Result<(f64, u32)> {
    if group.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite weight in group".into()));
    }
    if group.is_empty() {
        return Err(Error::Domain("empty group".into()));
    }
    let mut lo = group.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = group.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !spec.strict {
        lo = lo.min(0.0);
        hi = hi.max(0.0);
    }
    let (q_min, q_max) = (spec.q_min() as f64, spec.q_max() as f64);
    let scale = ((hi - lo) / (q_max - q_min)).max(MIN_SCALE);
    let zero = (q_min - lo / scale).round().clamp(q_min, q_max);
    Ok((scale, zero as u32))
}

pub fn quantize_group(group: &[f64], scale: f64, zero: u32, spec: &QuantSpec) -> Vec<u32> {
    let (q_min, q_max) = (spec.q_min() as f64, spec.q_max() as f64);
    group
        .iter()
        .map(|&w| ((w / scale).round() + zero as f64).clamp(q_min, q_max) as u32)
        .collect()
}

pub fn dequantize_group(codes: &[u32], scale: f64, zero: u32) -> Vec<f64> {
    codes
        .iter()
        .map(|&q| scale * (q as f64 - zero as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    pub spec: QuantSpec,
    pub rows: usize,
    pub cols: usize,
    /// One code per weight, row-major.
    pub codes: Vec<u32>,
    /// One entry per group, row-major over `(row, group-in-row)`.
    pub scales: Vec<f64>,
    pub zeros: Vec<u32>,
}

/// Number of groups covering one row of `cols` entries.
pub fn groups_per_row(cols: usize, group_size: usize) -> usize {
    cols.div_ceil(group_size)
}

impl QuantizedMatrix {
    pub fn quantize(w: &Matrix, spec: &QuantSpec) -> Result<Self> {
        let (rows, cols) = w.shape();
        let n_groups = rows * groups_per_row(cols, spec.group_size);
        let mut codes = Vec::with_capacity(rows * cols);
        let mut scales = Vec::with_capacity(n_groups);
        let mut zeros = Vec::with_capacity(n_groups);
        for r in 0..rows {
            for group in w.row(r).chunks(spec.group_size) {
                let (s, z) = fit_group_params(group, spec)?;
                codes.extend(quantize_group(group, s, z, spec));
                scales.push(s);
                zeros.push(z);
            }
        }
        Ok(Self {
            spec: *spec,
            rows,
            cols,
            codes,
            scales,
            zeros,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.scales.len()
    }

    /// Checks the structural invariants: code and zero-point ranges, positive
    /// scales, and consistent lengths.
    pub fn validate(&self) -> Result<()> {
        let gpr = groups_per_row(self.cols, self.spec.group_size);
        if self.codes.len() != self.rows * self.cols
            || self.scales.len() != self.rows * gpr
            || self.zeros.len() != self.scales.len()
        {
            return Err(Error::Shape("quantized matrix length mismatch".into()));
        }
        let q_max = self.spec.q_max();
        if self.codes.iter().chain(&self.zeros).any(|&q| q > q_max) {
            return Err(Error::Range(format!("code above q_max = {q_max}")));
        }
        if self.scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Range("non-positive group scale".into()));
        }
        Ok(())
    }

    pub fn dequantize(&self) -> Matrix {
        let g = self.spec.group_size;
        let mut data = Vec::with_capacity(self.rows * self.cols);
        let mut group_idx = 0;
        for r in 0..self.rows {
            let row = &self.codes[r * self.cols..(r + 1) * self.cols];
            for chunk in row.chunks(g) {
                data.extend(dequantize_group(
                    chunk,
                    self.scales[group_idx],
                    self.zeros[group_idx],
                ));
                group_idx += 1;
            }
        }
        Matrix::from_vec(self.rows, self.cols, data).expect("shape preserved")
    }

    pub fn mean_scale(&self) -> f64 {
        if self.scales.is_empty() {
            return 0.0;
        }
        self.scales.iter().sum::<f64>() / self.scales.len() as f64
    }
}

/// Quantize then dequantize every group of `w`.
pub fn fake_quantize_matrix(w: &Matrix, spec: &QuantSpec) -> Result<Matrix> {
    Ok(QuantizedMatrix::quantize(w, spec)?.dequantize())
}

/// Largest absolute reconstruction error.
pub fn max_abs_error(original: &Matrix, reconstructed: &Matrix) -> f64 {
    original
        .data()
        .iter()
        .zip(reconstructed.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RandomSource;
    use proptest::prelude::*;

    fn spec(bits: u8, g: usize) -> QuantSpec {
        QuantSpec::new(bits, g).unwrap()
    }

    #[test]
    fn spec_ranges() {
        assert_eq!(spec(2, 4).q_max(), 3);
        assert_eq!(spec(8, 4).q_max(), 255);
        assert_eq!(spec(1, 4).q_max(), 1);
        assert!(QuantSpec::new(5, 4).is_err());
        assert!(QuantSpec::new(16, 4).is_err());
        assert!(QuantSpec::new(2, 0).is_err());
    }

    #[test]
    fn fit_examples() {
        let (s, z) = fit_group_params(&[-1.0, 0.0, 1.0, 2.0], &spec(2, 4)).unwrap();
        assert_eq!((s, z), (1.0, 1));

        let (s, z) = fit_group_params(&[0.0; 4], &spec(2, 4)).unwrap();
        assert_eq!((s, z), (MIN_SCALE, 0));
        let codes = quantize_group(&[0.0; 4], s, z, &spec(2, 4));
        assert_eq!(dequantize_group(&codes, s, z), vec![0.0; 4]);

        let c = [0.5; 4];
        let (s, z) = fit_group_params(&c, &spec(2, 4)).unwrap();
        assert_eq!(s, 0.5 / 3.0);
        assert_eq!(z, 0);
        let back = dequantize_group(&quantize_group(&c, s, z, &spec(2, 4)), s, z);
        assert_eq!(back, vec![0.5; 4]);

        assert!(matches!(
            fit_group_params(&[1.0, f64::NAN], &spec(2, 4)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn quantize_and_dequantize_examples() {
        let sp = spec(2, 4);
        assert_eq!(
            quantize_group(&[-1.0, 0.0, 1.0, 2.0], 1.0, 1, &sp),
            vec![0, 1, 2, 3]
        );
        assert_eq!(quantize_group(&[0.0; 3], 0.37, 2, &sp), vec![2, 2, 2]);
        assert_eq!(quantize_group(&[1e6], 0.01, 1, &sp), vec![3]);
        assert_eq!(
            dequantize_group(&[0, 1, 2, 3], 1.0, 1),
            vec![-1.0, 0.0, 1.0, 2.0]
        );
        assert_eq!(dequantize_group(&[2, 2], 0.3, 2), vec![0.0, 0.0]);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let sp = spec(8, 4);
        assert_eq!(quantize_group(&[0.5, -0.5, 1.5], 1.0, 128, &sp), vec![129, 127, 130]);
    }

    #[test]
    fn strict_mode_fits_literal_range() {
        let sp = spec(2, 4).strict();
        let (s, z) = fit_group_params(&[1.0, 2.0, 3.0, 4.0], &sp).unwrap();
        assert_eq!(s, 1.0);
        // z = round(0 - 1/1) = -1 clamps to q_min
        assert_eq!(z, 0);
        let (s_wide, _) = fit_group_params(&[1.0, 2.0, 3.0, 4.0], &spec(2, 4)).unwrap();
        assert_eq!(s_wide, 4.0 / 3.0);
    }

    #[test]
    fn eight_bit_error_bound() {
        let mut rng = RandomSource::new(1);
        let data: Vec<f64> = (0..64 * 64).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        let w = Matrix::from_vec(64, 64, data).unwrap();
        let fq = fake_quantize_matrix(&w, &spec(8, 64)).unwrap();
        assert!(max_abs_error(&w, &fq) <= (2.0 / 255.0) / 2.0 + 1e-9);
    }

    #[test]
    fn zero_matrix_is_exact() {
        let w = Matrix::zeros(4, 10);
        let fq = fake_quantize_matrix(&w, &spec(2, 4)).unwrap();
        assert_eq!(fq, w);
    }

    #[test]
    fn tail_group_is_shorter() {
        let w = Matrix::from_vec(2, 5, (0..10).map(f64::from).collect()).unwrap();
        let q = QuantizedMatrix::quantize(&w, &spec(2, 4)).unwrap();
        assert_eq!(q.n_groups(), 4);
        q.validate().unwrap();
        // the tail group of row 0 holds only the value 4.0, widened to [0, 4]
        assert_eq!(q.scales[1], 4.0 / 3.0);
    }

    #[test]
    fn outlier_inflates_scale_proportionally() {
        let mut rng = RandomSource::new(9);
        let mut group: Vec<f64> = (0..16).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        let (s0, _) = fit_group_params(&group, &spec(2, 16)).unwrap();
        let peak = group.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        group[5] = 100.0 * peak;
        let (s1, _) = fit_group_params(&group, &spec(2, 16)).unwrap();
        let lo = group.iter().copied().fold(0.0, f64::min);
        assert_eq!(s1, (100.0 * peak - lo) / 3.0);
        assert!(s1 > 30.0 * s0);
    }

    #[test]
    fn error_bound_halves_per_bit() {
        let mut rng = RandomSource::new(4);
        let group: Vec<f64> = (0..128).map(|_| rng.standard_normal()).collect();
        let (s2, _) = fit_group_params(&group, &spec(2, 128)).unwrap();
        let (s3, _) = fit_group_params(&group, &spec(3, 128)).unwrap();
        let (s4, _) = fit_group_params(&group, &spec(4, 128)).unwrap();
        assert!((s2 / s3 - 7.0 / 3.0).abs() < 1e-12);
        assert!((s3 / s4 - 15.0 / 7.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn round_trip_within_half_step(
            values in prop::collection::vec(-10.0f64..10.0, 1..64),
            bits in prop::sample::select(vec![1u8, 2, 3, 4, 8]),
        ) {
            let sp = spec(bits, values.len());
            let (s, z) = fit_group_params(&values, &sp).unwrap();
            let codes = quantize_group(&values, s, z, &sp);
            prop_assert!(codes.iter().all(|&q| q <= sp.q_max()));
            prop_assert!(z <= sp.q_max());
            let back = dequantize_group(&codes, s, z);
            for (w, r) in values.iter().zip(&back) {
                let raw = (w / s).round() + z as f64;
                if raw >= sp.q_min() as f64 && raw <= sp.q_max() as f64 {
                    prop_assert!((w - r).abs() <= s / 2.0 + 1e-9);
                }
                if *w == 0.0 {
                    prop_assert_eq!(*r, 0.0);
                }
            }
        }

        #[test]
        fn fake_quantize_is_idempotent(
            values in prop::collection::vec(-3.0f64..3.0, 24),
            bits in prop::sample::select(vec![2u8, 3, 4, 8]),
        ) {
            let w = Matrix::from_vec(3, 8, values).unwrap();
            let sp = spec(bits, 4);
            let once = fake_quantize_matrix(&w, &sp).unwrap();
            let twice = fake_quantize_matrix(&once, &sp).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                // re-fitting the lattice can move a value by an ulp
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }
}
