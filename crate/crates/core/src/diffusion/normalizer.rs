use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const RANGE_EPS: f64 = 1e-7;

/// Per-dimension affine map of `[min, max]` onto `[−1, 1]`. Dimensions with
/// (near) zero span get unit scale and map their constant value to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    /// Fits on rows of length `dim`.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Result<Self> {
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        let mut n = 0;
        for row in rows {
            if row.len() != dim {
                return Err(Error::invalid(format!("row of {} values, expected {dim}", row.len())));
            }
            for (i, &x) in row.iter().enumerate() {
                min[i] = min[i].min(x);
                max[i] = max[i].max(x);
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::invalid("cannot fit normalizer on no data"));
        }
        Ok(Self { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    fn scale_offset(&self, i: usize) -> (f64, f64) {
        let span = self.max[i] - self.min[i];
        if span < RANGE_EPS {
            (1.0, -self.min[i])
        } else {
            let s = 2.0 / span;
            (s, -1.0 - s * self.min[i])
        }
    }

    pub fn normalize_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(i, &x)| {
                let (s, o) = self.scale_offset(i);
                s * x + o
            })
            .collect()
    }

    /// Constant dimensions decode to their constant whatever the input.
    fn decode(&self, i: usize, y: f64) -> f64 {
        if self.max[i] - self.min[i] < RANGE_EPS {
            return self.min[i];
        }
        let (s, o) = self.scale_offset(i);
        (y.clamp(-1.0, 1.0) - o) / s
    }

    /// Inverse map, clamping inputs to `[−1, 1]` first.
    pub fn denormalize_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(i, &y)| self.decode(i, y))
            .collect()
    }

    fn check<T: Scalar>(&self, t: &Tensor<T>) -> Result<()> {
        if t.shape().last() != Some(&self.dim()) {
            return Err(Error::invalid(format!(
                "tensor {:?} does not end in normalizer dim {}",
                t.shape(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn normalize<T: Scalar>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(t)?;
        let d = self.dim();
        Ok(Tensor::from_fn(t.shape().to_vec(), |i| {
            let (s, o) = self.scale_offset(i % d);
            T::lit(s * t.data()[i].as_f64() + o)
        }))
    }

    pub fn denormalize<T: Scalar>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(t)?;
        let d = self.dim();
        Ok(Tensor::from_fn(t.shape().to_vec(), |i| {
            T::lit(self.decode(i % d, t.data()[i].as_f64()))
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fitted() -> Normalizer {
        let rows = [vec![0.0, -2.0, 5.0], vec![1.0, 2.0, 5.0], vec![0.5, 0.0, 5.0]];
        Normalizer::fit(rows.iter().map(|r| r.as_slice()), 3).unwrap()
    }

    #[test]
    fn extremes_map_to_unit_interval() {
        let n = fitted();
        assert_eq!(n.normalize_row(&[0.0, -2.0, 5.0])[..2], [-1.0, -1.0]);
        assert_eq!(n.normalize_row(&[1.0, 2.0, 5.0])[..2], [1.0, 1.0]);
    }

    #[test]
    fn constant_dimension_maps_to_zero() {
        let n = fitted();
        assert_eq!(n.normalize_row(&[0.3, 0.1, 5.0])[2], 0.0);
        assert_eq!(n.denormalize_row(&[0.0, 0.0, 0.0])[2], 5.0);
    }

    #[test]
    fn fit_needs_data() {
        assert!(Normalizer::fit(std::iter::empty(), 2).is_err());
        let n = fitted();
        assert!(n.normalize(&Tensor::<f64>::zeros([2, 2])).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_in_range(a in 0.0f64..1.0, b in -2.0f64..2.0) {
            let n = fitted();
            let back = n.denormalize_row(&n.normalize_row(&[a, b, 5.0]));
            prop_assert!((back[0] - a).abs() < 1e-12);
            prop_assert!((back[1] - b).abs() < 1e-12);
            prop_assert!((back[2] - 5.0).abs() < 1e-12);
        }
    }
}
