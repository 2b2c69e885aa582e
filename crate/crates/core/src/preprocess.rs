//! Orthonormal Haar decomposition and per-dimension standardization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_len(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n));
    }
    Ok(())
}

/// Full Haar pyramid (all log₂M levels).
///
/// Output order is `[final scaling coefficient, details coarsest → finest]`,
/// so for M = 8: `[a, d₃, d₂₀, d₂₁, d₁₀, d₁₁, d₁₂, d₁₃]`.
pub fn haar_forward(signal: &[f64]) -> Result<Vec<f64>> {
    check_len(signal.len())?;
    let n = signal.len();
    let mut out = vec![0.0; n];
    let mut approx = signal.to_vec();
    let mut len = n;
    while len > 1 {
        let half = len / 2;
        let mut next = Vec::with_capacity(half);
        for k in 0..half {
            let (a, b) = (approx[2 * k], approx[2 * k + 1]);
            next.push((a + b) * std::f64::consts::FRAC_1_SQRT_2);
            // Level details occupy [half, len) of the output.
            out[half + k] = (a - b) * std::f64::consts::FRAC_1_SQRT_2;
        }
        approx = next;
        len = half;
    }
    out[0] = approx[0];
    Ok(out)
}

pub fn haar_inverse(coeffs: &[f64]) -> Result<Vec<f64>> {
    check_len(coeffs.len())?;
    let n = coeffs.len();
    let mut approx = vec![coeffs[0]];
    let mut len = 1;
    while len < n {
        let mut next = Vec::with_capacity(2 * len);
        for k in 0..len {
            let (a, d) = (approx[k], coeffs[len + k]);
            next.push((a + d) * std::f64::consts::FRAC_1_SQRT_2);
            next.push((a - d) * std::f64::consts::FRAC_1_SQRT_2);
        }
        approx = next;
        len *= 2;
    }
    Ok(approx)
}

/// Floor on fitted standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-dimension affine normalization `(v − mean) / std`.
///
/// Uses the population standard deviation (divide by n).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut iter = rows.into_iter();
        let first = iter.next().ok_or(Error::TooFewRows { needed: 2, found: 0 })?;
        let dim = first.len();
        let mut sum = first.to_vec();
        let mut rows_seen = vec![first];
        for r in iter {
            if r.len() != dim {
                return Err(Error::Length {
                    what: "standardizer row",
                    expected: dim,
                    found: r.len(),
                });
            }
            for (s, v) in sum.iter_mut().zip(r) {
                *s += v;
            }
            rows_seen.push(r);
        }
        let n = rows_seen.len();
        if n < 2 {
            return Err(Error::TooFewRows { needed: 2, found: n });
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0; dim];
        for r in &rows_seen {
            for ((acc, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|v| (v / n as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    /// Identity transform of dimension `dim`.
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::Length {
                what: "standardizer input",
                expected: self.dim(),
                found: v.len(),
            });
        }
        Ok(())
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check(v)?;
        Ok(v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect())
    }

    pub fn invert(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check(v)?;
        Ok(v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| x * s + m)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn constant_signal() {
        let c = 0.7;
        let coeffs = haar_forward(&[c; 8]).unwrap();
        assert!((coeffs[0] - c * 8f64.sqrt()).abs() < 1e-12);
        assert!(coeffs[1..].iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn two_level_example() {
        // level 1: a = [√2, −√2], d = [0, 0]; level 2: a = 0, d = 2
        let coeffs = haar_forward(&[1.0, 1.0, -1.0, -1.0]).unwrap();
        let expected = [0.0, 2.0, 0.0, 0.0];
        for (c, e) in coeffs.iter().zip(expected) {
            assert!((c - e).abs() < 1e-15, "{coeffs:?}");
        }
    }

    #[test]
    fn inverse_of_unit_scaling() {
        let x = haar_inverse(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        for v in x {
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert_eq!(haar_inverse(&[0.0; 16]).unwrap(), vec![0.0; 16]);
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(matches!(haar_forward(&[1.0; 6]), Err(Error::NotPowerOfTwo(6))));
        assert!(haar_inverse(&[]).is_err());
    }

    #[test]
    fn roundtrip_and_parseval_128() {
        let mut rng = Rng::new(12);
        for _ in 0..50 {
            let x = rng.normal_vec(128);
            let c = haar_forward(&x).unwrap();
            let e_x: f64 = x.iter().map(|v| v * v).sum();
            let e_c: f64 = c.iter().map(|v| v * v).sum();
            assert!((e_x - e_c).abs() < 1e-12 * e_x.max(1.0));
            let back = haar_inverse(&c).unwrap();
            let err = back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn haar_is_orthonormal(pow in 0u32..9, seed in any::<u64>()) {
            let n = 1usize << pow;
            let x = Rng::new(seed).normal_vec(n);
            let c = haar_forward(&x).unwrap();
            let e_x: f64 = x.iter().map(|v| v * v).sum();
            let e_c: f64 = c.iter().map(|v| v * v).sum();
            prop_assert!((e_x - e_c).abs() <= 1e-12 * e_x.max(1.0));
            let back = haar_inverse(&c).unwrap();
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn standardizer_roundtrip(seed in any::<u64>(), n in 2usize..40) {
            let mut rng = Rng::new(seed);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| {
                (0..3).map(|j| rng.uniform(-100.0, 100.0) * (j + 1) as f64).collect()
            }).collect();
            let s = Standardizer::fit(rows.iter().map(Vec::as_slice)).unwrap();
            for r in &rows {
                let back = s.invert(&s.apply(r).unwrap()).unwrap();
                for (a, b) in back.iter().zip(r) {
                    prop_assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn standardize_two_values() {
        let rows = [vec![0.0], vec![2.0]];
        let s = Standardizer::fit(rows.iter().map(Vec::as_slice)).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (1.0, 1.0));
        assert_eq!(s.apply(&[0.0]).unwrap(), vec![-1.0]);
        assert_eq!(s.apply(&[2.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn constant_column_is_clamped() {
        let rows = [vec![5.0, 1.0], vec![5.0, 3.0], vec![5.0, 2.0]];
        let s = Standardizer::fit(rows.iter().map(Vec::as_slice)).unwrap();
        assert_eq!(s.std[0], STD_FLOOR);
        for r in &rows {
            assert_eq!(s.apply(r).unwrap()[0], 0.0);
        }
    }

    #[test]
    fn standardized_training_data_moments() {
        let mut rng = Rng::new(1);
        let rows: Vec<Vec<f64>> = (0..500).map(|_| vec![rng.uniform(450.0, 800.0), rng.normal() * 3.0 + 7.0]).collect();
        let s = Standardizer::fit(rows.iter().map(Vec::as_slice)).unwrap();
        let z: Vec<Vec<f64>> = rows.iter().map(|r| s.apply(r).unwrap()).collect();
        for d in 0..2 {
            let mean = z.iter().map(|r| r[d]).sum::<f64>() / z.len() as f64;
            let var = z.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / z.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var.sqrt() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn too_few_rows() {
        let rows = [vec![1.0]];
        assert!(matches!(
            Standardizer::fit(rows.iter().map(Vec::as_slice)),
            Err(Error::TooFewRows { .. })
        ));
    }
}
