//! Image-space bicubic resampling. Shares the tap table with the in-graph
//! resize so degradation and in-network resizing use one kernel (Keys
//! a = -0.5, pixel-center alignment, edge clamping).

use super::ImageTensor;
use crate::error::{Error, Result};
use crate::tensor::bicubic_axis_taps;

/// Bicubic resize without value clipping. Linear in the input.
pub fn bicubic_resize_raw(img: &ImageTensor, target: (usize, usize)) -> Result<ImageTensor> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::InvalidArgument(
            "bicubic_resize: target dimensions must be positive".into(),
        ));
    }
    if th == img.height && tw == img.width {
        return Ok(img.clone());
    }
    let ty = bicubic_axis_taps(img.height, th);
    let tx = bicubic_axis_taps(img.width, tw);
    let w = img.width;
    let src = img.data();
    let mut out = vec![0.0f32; th * tw * 3];
    for (oy, typ) in ty.iter().enumerate() {
        for (ox, txp) in tx.iter().enumerate() {
            for c in 0..3 {
                let mut acc = 0.0f64;
                for ky in 0..4 {
                    let row = typ.idx[ky] * w;
                    let wy = typ.w[ky];
                    for kx in 0..4 {
                        acc += wy * txp.w[kx] * src[(row + txp.idx[kx]) * 3 + c] as f64;
                    }
                }
                out[(oy * tw + ox) * 3 + c] = acc as f32;
            }
        }
    }
    Ok(ImageTensor::from_raw(th, tw, out))
}

/// Bicubic resize with the output clipped to [0, 1].
pub fn bicubic_resize(img: &ImageTensor, target: (usize, usize)) -> Result<ImageTensor> {
    let mut out = bicubic_resize_raw(img, target)?;
    if target != (img.height, img.width) {
        // Identity resizes are exact copies and skip the clip entirely.
        for v in out.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
