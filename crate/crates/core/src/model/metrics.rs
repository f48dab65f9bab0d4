use djscc_tensor::{Scalar, Tensor, TensorError};

use crate::error::Result;

/// Reported in place of +∞ for perfect reconstructions.
pub const PSNR_CAP_DB: f64 = 200.0;

pub fn mse<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape() != y.shape() || x.numel() == 0 {
        return Err(TensorError::ShapeMismatch { op: "mse", lhs: x.shape().to_vec(), rhs: y.shape().to_vec() }.into());
    }
    let sum: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    Ok(sum / x.numel() as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>, max_value: f64) -> Result<f64> {
    let m = mse(x, x_hat)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_value * max_value / m).log10()).min(PSNR_CAP_DB))
}
