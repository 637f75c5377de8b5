//! Bilinear resampling with half-pixel centers and border clamping.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Resizes a `C × H × W` tensor to `C × out_h × out_w`.
///
/// Output pixel `d` samples source coordinate `(d + 0.5)·(in/out) − 0.5`,
/// clamped to the border; equal sizes copy the input unchanged.
pub fn bilinear_resize(image: &Tensor, (out_h, out_w): (usize, usize)) -> Result<Tensor> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::Argument(format!(
            "bilinear_resize expects C×H×W, got {:?}",
            image.shape()
        )));
    };
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::Argument(format!(
            "cannot resize {h}x{w} to {out_h}x{out_w}"
        )));
    }
    let mut out = vec![0.0; c * out_h * out_w];
    for p in 0..c {
        kernels::resize_plane(
            &image.data()[p * h * w..(p + 1) * h * w],
            (h, w),
            &mut out[p * out_h * out_w..(p + 1) * out_h * out_w],
            (out_h, out_w),
        );
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}
