use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use half::f16;

/// Per-row affine 8-bit quantization with f16 scale and zero point.
#[derive(Debug, Clone, PartialEq)]
pub struct Int8Tensor {
    pub shape: [usize; 2],
    /// f16-representable per-row scales.
    pub scales: Vec<f32>,
    /// f16-representable per-row offsets: `x ~ zero + q * scale`.
    pub zeros: Vec<f32>,
    pub q: Vec<u8>,
}

impl Int8Tensor {
    pub fn quantize<T: Scalar>(w: &Tensor<T>) -> Result<Self> {
        if w.rank() != 2 {
            return Err(Error::Invalid(format!("int8 quantization expects a matrix, got {:?}", w.shape())));
        }
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        let mut scales = Vec::with_capacity(rows);
        let mut zeros = Vec::with_capacity(rows);
        let mut q = Vec::with_capacity(rows * cols);
        for row in w.data().chunks(cols) {
            let lo = row.iter().map(|v| v.as_f64()).fold(f64::INFINITY, f64::min);
            let hi = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let zero = f16::from_f64(lo).to_f64();
            let mut scale = f16::from_f64((hi - zero) / 255.0).to_f64();
            if scale <= 0.0 {
                scale = f16::from_f64(1e-4).to_f64();
            }
            for v in row {
                q.push(((v.as_f64() - zero) / scale).round().clamp(0.0, 255.0) as u8);
            }
            scales.push(scale as f32);
            zeros.push(zero as f32);
        }
        Ok(Self {
            shape: [rows, cols],
            scales,
            zeros,
            q,
        })
    }

    pub fn dequantize<T: Scalar>(&self) -> Tensor<T> {
        let cols = self.shape[1];
        let data = self
            .q
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let r = i / cols;
                T::of(self.zeros[r] as f64 + v as f64 * self.scales[r] as f64)
            })
            .collect();
        Tensor::new(self.shape.to_vec(), data).expect("stored shape")
    }

    /// Code bits plus 16-bit scale and zero per row.
    pub fn storage_bits(&self) -> usize {
        self.q.len() * 8 + self.shape[0] * 32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_within_half_step() {
        let w = Tensor::<f32>::from_f64([2, 5], &[0.1, -0.2, 0.05, 0.3, -0.07, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let q = Int8Tensor::quantize(&w).unwrap();
        let d = q.dequantize::<f32>();
        for (i, (a, b)) in w.data().iter().zip(d.data()).enumerate() {
            let step = q.scales[i / 5];
            assert!((a - b).abs() <= 0.5 * step + 1e-3, "{a} vs {b}");
        }
        assert_eq!(q.storage_bits(), 10 * 8 + 2 * 32);
    }
}
