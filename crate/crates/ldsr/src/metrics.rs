//! Pixel-fidelity metrics.

use crate::data::ImageTensor;
use crate::error::{Error, Result};

/// PSNR cap standing in for "infinite" on identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// PSNR in dB over RGB values in [0, 1]: 10 * log10(1 / MSE), capped at
/// 100 dB. No luma conversion, no border crop.
pub fn psnr(pred: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::Shape(format!(
            "psnr: dims {}x{} vs {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut acc = 0.0f64;
    for (a, b) in pred.data().iter().zip(gt.data()) {
        let d = (*a - *b) as f64;
        acc += d * d;
    }
    let mse = acc / pred.data().len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}
